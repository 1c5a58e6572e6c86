//! Dense `f64` tensors and the small kernel set the model is built from.
//!
//! Kernels here are plain forward functions. Gradients come from
//! [`Tape`], which records each kernel application and replays the
//! hand-written adjoint in reverse order.
//!
//! Mul-add accounting: a product of an `m×p` and a `p×n` matrix costs
//! `m·p·n` mul-adds. Only matrix products are counted; normalization,
//! softmax and activations are not. One mul-add is two FLOPs.

mod gradcheck;
mod layers;
mod params;
mod tape;

pub use gradcheck::{central_difference, relative_error, GradCheck};
pub use layers::{Linear, Mlp};
pub use params::{ParamId, ParamStore};
pub use tape::{Grads, NodeId, Tape};

use std::cell::Cell;

use crate::error::{Error, Result};

/// Additive mask value standing in for negative infinity.
pub const MASK_NEG: f64 = -1e9;

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn is_masked(m: f64) -> bool {
    m <= MASK_NEG * 0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)`; a 1-D tensor reads as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (
                self.shape[..self.shape.len() - 1].iter().product(),
                *self.shape.last().unwrap_or(&1),
            ),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Scalar multiply-accumulate counter.
#[derive(Debug, Default)]
pub struct OpCounter {
    mul_adds: Cell<u64>,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.mul_adds.set(self.mul_adds.get() + n);
    }

    pub fn mul_adds(&self) -> u64 {
        self.mul_adds.get()
    }

    pub fn flops(&self) -> u64 {
        2 * self.mul_adds.get()
    }

    pub fn reset(&self) {
        self.mul_adds.set(0);
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::dim(op, format!("expected a matrix, got shape {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `a · b` for `a: m×p`, `b: p×n`.
pub fn matmul(a: &Tensor, b: &Tensor, ops: &OpCounter) -> Result<Tensor> {
    let (m, p) = check_matrix("matmul", a)?;
    let (p2, n) = check_matrix("matmul", b)?;
    if p != p2 {
        return Err(Error::dim(
            "matmul",
            format!("{:?} · {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * p..(i + 1) * p];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b.data[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    ops.add((m * p * n) as u64);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a · bᵀ` for `a: m×p`, `b: n×p`.
pub fn matmul_nt(a: &Tensor, b: &Tensor, ops: &OpCounter) -> Result<Tensor> {
    let (m, p) = check_matrix("matmul_nt", a)?;
    let (n, p2) = check_matrix("matmul_nt", b)?;
    if p != p2 {
        return Err(Error::dim(
            "matmul_nt",
            format!("{:?} · {:?}ᵀ", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * p..(i + 1) * p];
        for j in 0..n {
            let brow = &b.data[j * p..(j + 1) * p];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    ops.add((m * p * n) as u64);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `aᵀ · b` for `a: p×m`, `b: p×n`. Backward-pass helper, not counted.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (p, m) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for k in 0..p {
        let arow = &a.data[k * m..(k + 1) * m];
        let brow = &b.data[k * n..(k + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// Adds a length-`c` bias to every row of an `r×c` matrix.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2();
    if bias.len() != c {
        return Err(Error::dim(
            "add_row_bias",
            format!("{:?} + {:?}", x.shape, bias.shape),
        ));
    }
    let mut out = x.clone();
    for i in 0..r {
        for (o, b) in out.data[i * c..(i + 1) * c].iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

/// Row-wise softmax of `logits + mask`.
///
/// Entries with mask at or below `MASK_NEG / 2` are exactly zero in the
/// output. A row with no visible entry comes back all zeros.
pub fn masked_softmax(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if logits.shape != mask.shape {
        return Err(Error::dim(
            "masked_softmax",
            format!("logits {:?} vs mask {:?}", logits.shape, mask.shape),
        ));
    }
    let (r, c) = logits.dims2();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let lrow = &logits.data[i * c..(i + 1) * c];
        let mrow = &mask.data[i * c..(i + 1) * c];
        let orow = &mut out[i * c..(i + 1) * c];
        let mut max = f64::NEG_INFINITY;
        for (l, m) in lrow.iter().zip(mrow) {
            if !is_masked(*m) {
                max = max.max(l + m);
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for ((o, l), m) in orow.iter_mut().zip(lrow).zip(mrow) {
            if !is_masked(*m) {
                *o = (l + m - max).exp();
                sum += *o;
            }
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(Tensor {
        shape: logits.shape.clone(),
        data: out,
    })
}

/// Per-row normalization outputs kept for the backward pass.
pub(crate) struct LayerNormOut {
    pub out: Tensor,
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_full(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<LayerNormOut> {
    let (r, c) = x.dims2();
    if c == 0 || gain.len() != c || bias.len() != c {
        return Err(Error::dim(
            "layer_norm",
            format!("x {:?}, gain {:?}, bias {:?}", x.shape, gain.shape, bias.shape),
        ));
    }
    let mut out = vec![0.0; r * c];
    let mut xhat = vec![0.0; r * c];
    let mut rstd = Vec::with_capacity(r);
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[i * c + j] = h;
            out[i * c + j] = h * gain.data[j] + bias.data[j];
        }
    }
    Ok(LayerNormOut {
        out: Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        xhat: Tensor {
            shape: x.shape.clone(),
            data: xhat,
        },
        rstd,
    })
}

/// Per-row layer normalization with affine gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(layer_norm_full(x, gain, bias)?.out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-layer GELU MLP `gelu(x·w1 + b1)·w2 + b2`.
pub fn ffn(
    x: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
    ops: &OpCounter,
) -> Result<Tensor> {
    let mut h = add_row_bias(&matmul(x, w1, ops)?, b1)?;
    for v in h.data.iter_mut() {
        *v = gelu(*v);
    }
    add_row_bias(&matmul(&h, w2, ops)?, b2)
}
