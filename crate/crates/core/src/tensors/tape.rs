//! Reverse-mode gradient accumulation over a recorded op sequence.
//!
//! Each method on [`Tape`] applies one kernel, stores the result, and
//! remembers enough to run its adjoint. [`Tape::backward`] walks the
//! record in reverse and accumulates gradients for every node and for
//! every parameter the forward pass touched.

use std::borrow::Cow;

use super::{
    add_row_bias, gelu, gelu_grad, layer_norm_full, masked_softmax, matmul, matmul_nt, matmul_tn,
    sigmoid, OpCounter, ParamId, ParamStore, Tensor,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Sigmoid(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Softmax(NodeId),
    Gather {
        src: NodeId,
        idx: Vec<Option<usize>>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Reshape(NodeId),
    MaskRows {
        x: NodeId,
        keep: Vec<bool>,
    },
    Bce {
        logit: NodeId,
        label: f64,
    },
    WeightedSum {
        x: NodeId,
        w: Tensor,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    ops: OpCounter,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Dense per-parameter gradients, zeros for untouched parameters.
    pub fn into_param_grads(self, store: &ParamStore) -> Vec<Tensor> {
        self.params
            .into_iter()
            .zip(store.ids())
            .map(|(g, id)| g.unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
            .collect()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            ops: OpCounter::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn ops(&self) -> &OpCounter {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Cow::Owned(t), Op::Leaf)
    }

    /// Leaf that borrows its value instead of copying it.
    pub fn leaf_ref(&mut self, t: &'p Tensor) -> NodeId {
        self.push(Cow::Borrowed(t), Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let params = self.params;
        self.push(Cow::Borrowed(params.get(id)), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b), &self.ops)?;
        Ok(self.push(Cow::Owned(v), Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_nt(self.value(a), self.value(b), &self.ops)?;
        Ok(self.push(Cow::Owned(v), Op::MatMulNt(a, b)))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = add_row_bias(self.value(x), self.value(bias))?;
        Ok(self.push(Cow::Owned(v), Op::AddBias(x, bias)))
    }

    /// `x · w + b` with parameter weights.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(v), Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let vx = self.value(x);
        let v = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| v * s).collect())
            .expect("same shape");
        self.push(Cow::Owned(v), Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let v = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| gelu(v)).collect())
            .expect("same shape");
        self.push(Cow::Owned(v), Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let v = Tensor::new(
            vx.shape().to_vec(),
            vx.data().iter().map(|&v| sigmoid(v)).collect(),
        )
        .expect("same shape");
        self.push(Cow::Owned(v), Op::Sigmoid(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let r = layer_norm_full(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(
            Cow::Owned(r.out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: r.xhat,
                rstd: r.rstd,
            },
        ))
    }

    pub fn layer_norm_params(&mut self, x: NodeId, gain: ParamId, bias: ParamId) -> Result<NodeId> {
        let g = self.param(gain);
        let b = self.param(bias);
        self.layer_norm(x, g, b)
    }

    /// Row softmax of `x + mask`; the mask is a constant.
    pub fn masked_softmax(&mut self, x: NodeId, mask: &Tensor) -> Result<NodeId> {
        let v = masked_softmax(self.value(x), mask)?;
        Ok(self.push(Cow::Owned(v), Op::Softmax(x)))
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather_rows(&mut self, src: NodeId, idx: Vec<Option<usize>>) -> Result<NodeId> {
        let vs = self.value(src);
        let (r, c) = vs.dims2();
        let mut data = vec![0.0; idx.len() * c];
        for (o, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= r {
                    return Err(Error::dim(
                        "gather_rows",
                        format!("row {} of {}", i, r),
                    ));
                }
                data[o * c..(o + 1) * c].copy_from_slice(vs.row(i));
            }
        }
        let v = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(Cow::Owned(v), Op::Gather { src, idx }))
    }

    /// Embedding lookup from a parameter table.
    pub fn embed(&mut self, table: ParamId, ids: Vec<Option<usize>>) -> Result<NodeId> {
        let t = self.param(table);
        self.gather_rows(t, ids)
    }

    pub fn row(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        self.gather_rows(x, vec![Some(i)])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Error::dim("concat_rows", "column counts differ"));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let v = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Cow::Owned(v), Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let v = Tensor::matrix(rows, total, data)?;
        Ok(self.push(Cow::Owned(v), Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let (r, c) = vx.dims2();
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("{}..{} of {}", start, start + len, c)));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&vx.row(i)[start..start + len]);
        }
        let v = Tensor::matrix(r, len, data)?;
        Ok(self.push(Cow::Owned(v), Op::SliceCols { x, start }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Cow::Owned(v), Op::Reshape(x)))
    }

    /// Zeroes rows where `keep` is false.
    pub fn mask_rows(&mut self, x: NodeId, keep: Vec<bool>) -> Result<NodeId> {
        let mut v = self.value(x).clone();
        if keep.len() != v.rows() {
            return Err(Error::dim("mask_rows", "keep length != rows"));
        }
        for (i, k) in keep.iter().enumerate() {
            if !k {
                v.row_mut(i).fill(0.0);
            }
        }
        Ok(self.push(Cow::Owned(v), Op::MaskRows { x, keep }))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `label`, with the
    /// probability clamped to `[1e-12, 1 - 1e-12]`. The adjoint is
    /// `p - label`.
    pub fn bce_with_logit(&mut self, logit: NodeId, label: f64) -> Result<NodeId> {
        let z = self.value(logit);
        if z.len() != 1 {
            return Err(Error::dim("bce", "logit must be a scalar"));
        }
        let p = sigmoid(z.data()[0]);
        let v = Tensor::scalar(crate::model::bce_loss(p, label));
        Ok(self.push(Cow::Owned(v), Op::Bce { logit, label }))
    }

    /// `Σ w ⊙ x`, used to reduce a tensor to a scalar for gradient checks.
    pub fn weighted_sum(&mut self, x: NodeId, w: Tensor) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.len() != w.len() {
            return Err(Error::dim("weighted_sum", "weight length"));
        }
        let s = vx.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Cow::Owned(Tensor::scalar(s)), Op::WeightedSum { x, w }))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Grads {
        let seed = Tensor::filled(self.value(loss).shape(), 1.0);
        self.backward_from(loss, seed)
    }

    pub fn backward_from(&self, out: NodeId, seed: Tensor) -> Grads {
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pg: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        g[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let gi = match &node.op {
                Op::Leaf => continue,
                _ => match g[i].take() {
                    Some(t) => t,
                    None => continue,
                },
            };
            let val = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Param(id) => {
                    accumulate(&mut pg[id.0], gi.clone());
                    g[i] = Some(gi);
                }
                Op::MatMul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let sink = OpCounter::new();
                    let ga = matmul_nt(&gi, vb, &sink).expect("shapes recorded");
                    let gb = matmul_tn(va, &gi);
                    accumulate(&mut g[a.0], ga);
                    accumulate(&mut g[b.0], gb);
                }
                Op::MatMulNt(a, b) => {
                    // c = a bᵀ: da = g b, db = gᵀ a
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let sink = OpCounter::new();
                    let ga = matmul(&gi, vb, &sink).expect("shapes recorded");
                    let gb = matmul_tn(&gi, va);
                    accumulate(&mut g[a.0], ga);
                    accumulate(&mut g[b.0], gb);
                }
                Op::AddBias(x, b) => {
                    let (r, c) = gi.dims2();
                    let mut gb = vec![0.0; c];
                    for row in 0..r {
                        for (s, v) in gb.iter_mut().zip(gi.row(row)) {
                            *s += v;
                        }
                    }
                    let bshape = self.value(*b).shape().to_vec();
                    accumulate(&mut g[b.0], Tensor::new(bshape, gb).expect("bias shape"));
                    accumulate(&mut g[x.0], gi);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g[a.0], gi.clone());
                    accumulate(&mut g[b.0], gi);
                }
                Op::Scale(x, s) => {
                    let mut t = gi;
                    t.data_mut().iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut g[x.0], t);
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    let mut t = gi;
                    for (gv, xv) in t.data_mut().iter_mut().zip(vx.data()) {
                        *gv *= gelu_grad(*xv);
                    }
                    accumulate(&mut g[x.0], t);
                }
                Op::Sigmoid(x) => {
                    let mut t = gi;
                    for (gv, y) in t.data_mut().iter_mut().zip(val.data()) {
                        *gv *= y * (1.0 - y);
                    }
                    accumulate(&mut g[x.0], t);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (r, c) = gi.dims2();
                    let vg = self.value(*gain);
                    let mut dgain = vec![0.0; c];
                    let mut dbias = vec![0.0; c];
                    let mut dx = vec![0.0; r * c];
                    let n = c as f64;
                    for row in 0..r {
                        let gr = gi.row(row);
                        let hr = xhat.row(row);
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                            let dh = gr[j] * vg.data()[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = gr[j] * vg.data()[j];
                            dx[row * c + j] =
                                rstd[row] * (dh - sum_dh / n - hr[j] * sum_dh_h / n);
                        }
                    }
                    let gshape = vg.shape().to_vec();
                    let bshape = self.value(*bias).shape().to_vec();
                    accumulate(&mut g[gain.0], Tensor::new(gshape, dgain).expect("gain"));
                    accumulate(&mut g[bias.0], Tensor::new(bshape, dbias).expect("bias"));
                    accumulate(
                        &mut g[x.0],
                        Tensor::new(gi.shape().to_vec(), dx).expect("x"),
                    );
                }
                Op::Softmax(x) => {
                    let (r, c) = gi.dims2();
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        let y = val.row(row);
                        let gr = gi.row(row);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[row * c + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(
                        &mut g[x.0],
                        Tensor::new(gi.shape().to_vec(), dx).expect("x"),
                    );
                }
                Op::Gather { src, idx } => {
                    let vs = self.value(*src);
                    let c = vs.cols();
                    let mut t = Tensor::zeros(vs.shape());
                    for (o, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            for (d, s) in t.row_mut(i).iter_mut().zip(gi.row(o)) {
                                *d += s;
                            }
                        }
                    }
                    debug_assert_eq!(t.cols(), c);
                    accumulate(&mut g[src.0], t);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let vp = self.value(*p);
                        let n = vp.len();
                        let part = Tensor::new(
                            vp.shape().to_vec(),
                            gi.data()[offset..offset + n].to_vec(),
                        )
                        .expect("part");
                        offset += n;
                        accumulate(&mut g[p.0], part);
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = gi.rows();
                    let mut start = 0;
                    for p in parts {
                        let vp = self.value(*p);
                        let w = vp.cols();
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&gi.row(r)[start..start + w]);
                        }
                        start += w;
                        accumulate(
                            &mut g[p.0],
                            Tensor::new(vp.shape().to_vec(), data).expect("part"),
                        );
                    }
                }
                Op::SliceCols { x, start } => {
                    let vx = self.value(*x);
                    let mut t = Tensor::zeros(vx.shape());
                    let w = gi.cols();
                    for r in 0..gi.rows() {
                        t.row_mut(r)[*start..start + w].copy_from_slice(gi.row(r));
                    }
                    accumulate(&mut g[x.0], t);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut g[x.0], gi.reshape(shape).expect("reshape"));
                }
                Op::MaskRows { x, keep } => {
                    let mut t = gi;
                    for (r, k) in keep.iter().enumerate() {
                        if !k {
                            t.row_mut(r).fill(0.0);
                        }
                    }
                    accumulate(&mut g[x.0], t);
                }
                Op::Bce { logit, label } => {
                    let z = self.value(*logit).data()[0];
                    let d = (sigmoid(z) - label) * gi.data()[0];
                    let shape = self.value(*logit).shape().to_vec();
                    accumulate(&mut g[logit.0], Tensor::new(shape, vec![d]).expect("scalar"));
                }
                Op::WeightedSum { x, w } => {
                    let s = gi.data()[0];
                    let shape = self.value(*x).shape().to_vec();
                    let data = w.data().iter().map(|v| v * s).collect();
                    accumulate(&mut g[x.0], Tensor::new(shape, data).expect("weights"));
                }
            }
        }
        Grads {
            nodes: g,
            params: pg,
        }
    }
}
