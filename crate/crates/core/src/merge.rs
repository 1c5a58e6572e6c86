//! Token merge: `L` sequence tokens of width `d` become `L/K` tokens of
//! width `K·d`, either by plain concatenation or after a small transformer
//! applied inside each group of `K` adjacent tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_core, ffn_half, AttentionParams};
use crate::error::{Error, Result};
use crate::tensors::{NodeId, ParamStore, Tape, Tensor, MASK_NEG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    Concat,
    InnerTrans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeConfig {
    pub k: usize,
    pub mode: MergeMode,
    pub inner_layers: usize,
}

fn check_groups(rows: usize, k: usize) -> Result<()> {
    if k == 0 || rows % k != 0 {
        return Err(Error::dim(
            "merge",
            format!("{} rows not divisible into groups of {}", rows, k),
        ));
    }
    Ok(())
}

/// Row `i` of the output is `h[iK] ‖ … ‖ h[iK + K − 1]`.
pub fn merge_concat(tape: &mut Tape, h: NodeId, k: usize) -> Result<NodeId> {
    let (rows, cols) = tape.value(h).dims2();
    check_groups(rows, k)?;
    tape.reshape(h, vec![rows / k, k * cols])
}

/// A merged group is padding only when every constituent is.
pub fn merged_pad(pad: &[bool], k: usize) -> Vec<bool> {
    pad.chunks(k).map(|g| g.iter().all(|p| *p)).collect()
}

/// Shared per-group transformer blocks at width `d`.
#[derive(Debug, Clone)]
pub struct InnerTransParams {
    pub blocks: Vec<AttentionParams>,
}

impl InnerTransParams {
    pub fn new(store: &mut ParamStore, width: usize, layers: usize, rng: &mut impl Rng) -> Self {
        InnerTransParams {
            blocks: (0..layers)
                .map(|i| AttentionParams::new(store, &format!("inner.{}", i), width, 1, rng))
                .collect(),
        }
    }

    pub fn param_count(width: usize, layers: usize) -> usize {
        layers * AttentionParams::param_count(width)
    }

    /// Mul-adds for `groups` groups of `k` tokens at width `d`.
    pub fn mul_adds(width: usize, k: usize, groups: usize, layers: usize) -> u64 {
        let (d, k, g) = (width as u64, k as u64, groups as u64);
        layers as u64 * g * (12 * k * d * d + 2 * k * k * d)
    }
}

/// Full attention inside each group with pad keys hidden; pad rows are
/// zeroed after every layer.
pub fn merge_inner_trans(
    tape: &mut Tape,
    h: NodeId,
    pad: &[bool],
    cfg: &MergeConfig,
    params: &InnerTransParams,
) -> Result<NodeId> {
    let (rows, _) = tape.value(h).dims2();
    check_groups(rows, cfg.k)?;
    if pad.len() != rows {
        return Err(Error::dim("merge_inner_trans", "pad mask length != rows"));
    }
    let k = cfg.k;
    let masks: Vec<Tensor> = pad
        .chunks(k)
        .map(|g| {
            let mut m = Tensor::zeros(&[k, k]);
            for (i, qp) in g.iter().enumerate() {
                for (j, kp) in g.iter().enumerate() {
                    if *qp || *kp {
                        m.row_mut(i)[j] = MASK_NEG;
                    }
                }
            }
            m
        })
        .collect();
    let keep: Vec<bool> = pad.iter().map(|p| !p).collect();

    let mut x = h;
    for p in &params.blocks {
        let ln = tape.layer_norm_params(x, p.ln1_gain, p.ln1_bias)?;
        let q = p.wq.forward(tape, ln)?;
        let kk = p.wk.forward(tape, ln)?;
        let v = p.wv.forward(tape, ln)?;
        let mut outs = Vec::with_capacity(rows / k);
        for (g, mask) in masks.iter().enumerate() {
            let idx: Vec<Option<usize>> = (g * k..(g + 1) * k).map(Some).collect();
            let qg = tape.gather_rows(q, idx.clone())?;
            let kg = tape.gather_rows(kk, idx.clone())?;
            let vg = tape.gather_rows(v, idx)?;
            outs.push(attention_core(tape, qg, kg, vg, mask, 1)?);
        }
        let a = tape.concat_rows(&outs)?;
        let o = p.wo.forward(tape, a)?;
        let r = tape.add(x, o)?;
        let y = ffn_half(tape, p, r)?;
        x = tape.mask_rows(y, keep.clone())?;
    }
    merge_concat(tape, x, k)
}

pub fn merge(
    tape: &mut Tape,
    h: NodeId,
    pad: &[bool],
    cfg: &MergeConfig,
    inner: Option<&InnerTransParams>,
) -> Result<NodeId> {
    match (cfg.mode, inner) {
        (MergeMode::Concat, _) => merge_concat(tape, h, cfg.k),
        (MergeMode::InnerTrans, Some(p)) => merge_inner_trans(tape, h, pad, cfg, p),
        (MergeMode::InnerTrans, None) => Err(Error::Config(
            "InnerTrans merge requires inner parameters".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::tensors::{gelu, layer_norm};

    fn random(rng: &mut impl rand::Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn inner(width: usize, layers: usize, seed: u64) -> (ParamStore, InnerTransParams) {
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "inner-test");
        let p = InnerTransParams::new(&mut store, width, layers, &mut rng);
        (store, p)
    }

    fn cfg(k: usize) -> MergeConfig {
        MergeConfig {
            k,
            mode: MergeMode::InnerTrans,
            inner_layers: 1,
        }
    }

    #[test]
    fn concat_example_and_round_trip() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]];
        let h = tape.leaf(Tensor::from_rows(&rows).unwrap());
        let m = merge_concat(&mut tape, h, 2).unwrap();
        assert_eq!(tape.value(m).shape(), &[2, 4]);
        assert_eq!(tape.value(m).row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.value(m).row(1), &[5.0, 6.0, 7.0, 8.0]);
        let back = tape.value(m).reshape(vec![4, 2]).unwrap();
        assert_eq!(&back, tape.value(h));
        assert!(merge_concat(&mut tape, h, 3).is_err());
    }

    #[test]
    fn k1_with_zero_output_projections_equals_concat() {
        let (mut store, p) = inner(3, 1, 1);
        let b = &p.blocks[0];
        for id in [b.wo.w, b.wo.b, b.ffn.out.w, b.ffn.out.b] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut rng = substream(1, "x");
        let x = random(&mut rng, 4, 3);
        let mut tape = Tape::new(&store);
        let h = tape.leaf(x.clone());
        let y = merge_inner_trans(&mut tape, h, &[false; 4], &cfg(1), &p).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn hand_unrolled_k2_d2() {
        let (mut store, p) = inner(2, 1, 2);
        let b = p.blocks[0];
        let set = |s: &mut ParamStore, id, v: &[f64]| s.get_mut(id).data_mut().copy_from_slice(v);
        set(&mut store, b.wq.w, &[0.5, -0.2, 0.1, 0.3]);
        set(&mut store, b.wq.b, &[0.05, 0.0]);
        set(&mut store, b.wk.w, &[0.4, 0.1, -0.3, 0.2]);
        set(&mut store, b.wk.b, &[0.0, -0.1]);
        set(&mut store, b.wv.w, &[1.0, 0.5, -0.5, 0.25]);
        set(&mut store, b.wv.b, &[0.1, 0.2]);
        set(&mut store, b.wo.w, &[0.3, 0.0, 0.2, 0.7]);
        set(&mut store, b.wo.b, &[0.0, 0.0]);
        set(&mut store, b.ln1_gain, &[1.2, 0.8]);
        set(&mut store, b.ln1_bias, &[0.1, -0.1]);
        let x = [[0.3, -0.7], [1.1, 0.4]];

        // LN over 2 features: xhat = ±(a−b)/2 / sqrt(((a−b)/2)² + eps)
        let ln = |r: [f64; 2], g: [f64; 2], bb: [f64; 2]| {
            let mu = (r[0] + r[1]) / 2.0;
            let var = ((r[0] - mu).powi(2) + (r[1] - mu).powi(2)) / 2.0;
            let s = (var + 1e-5).sqrt();
            [(r[0] - mu) / s * g[0] + bb[0], (r[1] - mu) / s * g[1] + bb[1]]
        };
        let lin = |r: [f64; 2], w: [f64; 4], bb: [f64; 2]| {
            [r[0] * w[0] + r[1] * w[2] + bb[0], r[0] * w[1] + r[1] * w[3] + bb[1]]
        };
        let l = [ln(x[0], [1.2, 0.8], [0.1, -0.1]), ln(x[1], [1.2, 0.8], [0.1, -0.1])];
        let q = l.map(|r| lin(r, [0.5, -0.2, 0.1, 0.3], [0.05, 0.0]));
        let k = l.map(|r| lin(r, [0.4, 0.1, -0.3, 0.2], [0.0, -0.1]));
        let v = l.map(|r| lin(r, [1.0, 0.5, -0.5, 0.25], [0.1, 0.2]));
        let mut want = Vec::new();
        for i in 0..2 {
            let s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) / 2f64.sqrt();
            let s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) / 2f64.sqrt();
            let a0 = 1.0 / (1.0 + (s1 - s0).exp());
            let a1 = 1.0 - a0;
            let att = [a0 * v[0][0] + a1 * v[1][0], a0 * v[0][1] + a1 * v[1][1]];
            let o = lin(att, [0.3, 0.0, 0.2, 0.7], [0.0, 0.0]);
            let h = [x[i][0] + o[0], x[i][1] + o[1]];
            let l2 = layer_norm(
                &Tensor::matrix(1, 2, h.to_vec()).unwrap(),
                store.get(b.ln2_gain),
                store.get(b.ln2_bias),
            )
            .unwrap();
            let w1 = store.get(b.ffn.hidden.w);
            let b1 = store.get(b.ffn.hidden.b);
            let w2 = store.get(b.ffn.out.w);
            let b2 = store.get(b.ffn.out.b);
            for c in 0..2 {
                let mut f = b2.data()[c];
                for j in 0..8 {
                    let z = l2.get(0, 0) * w1.get(0, j) + l2.get(0, 1) * w1.get(1, j) + b1.data()[j];
                    f += gelu(z) * w2.get(j, c);
                }
                want.push(h[c] + f);
            }
        }
        let mut tape = Tape::new(&store);
        let hn = tape.leaf(Tensor::from_rows(&[x[0].to_vec(), x[1].to_vec()]).unwrap());
        let y = merge_inner_trans(&mut tape, hn, &[false, false], &cfg(2), &p).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4]);
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn group_locality() {
        let (store, p) = inner(3, 2, 3);
        let mut rng = substream(3, "x");
        let x = random(&mut rng, 8, 3);
        let run = |x: &Tensor| {
            let mut tape = Tape::new(&store);
            let h = tape.leaf(x.clone());
            let y = merge_inner_trans(&mut tape, h, &[false; 8], &cfg(2), &p).unwrap();
            tape.value(y).clone()
        };
        let base = run(&x);
        let mut x2 = x.clone();
        x2.row_mut(5)[1] += 0.7;
        let moved = run(&x2);
        for g in 0..4 {
            assert_eq!(base.row(g) == moved.row(g), g != 2, "group {}", g);
        }
    }

    #[test]
    fn identical_tokens_identical_outputs() {
        let (store, p) = inner(3, 1, 4);
        let row = vec![0.2, -0.5, 0.9];
        let x = Tensor::from_rows(&vec![row; 4]).unwrap();
        let mut tape = Tape::new(&store);
        let h = tape.leaf(x);
        let y = merge_inner_trans(&mut tape, h, &[false; 4], &cfg(4), &p).unwrap();
        let out = tape.value(y).row(0);
        for t in 1..4 {
            for c in 0..3 {
                assert!((out[t * 3 + c] - out[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (store, p) = inner(2, 1, 5);
        let mut rng = substream(5, "x");
        let x = random(&mut rng, 3, 2);
        let perm = [2, 0, 1];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let run = |x: Tensor| {
            let mut tape = Tape::new(&store);
            let h = tape.leaf(x);
            let y = merge_inner_trans(&mut tape, h, &[false; 3], &cfg(3), &p).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(x), run(xp));
        for (o, &i) in perm.iter().enumerate() {
            for c in 0..2 {
                assert!((b.get(0, o * 2 + c) - a.get(0, i * 2 + c)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn padded_rows_stay_zero() {
        let (store, p) = inner(2, 1, 6);
        let mut rng = substream(6, "x");
        let mut x = random(&mut rng, 4, 2);
        x.row_mut(0).fill(0.0);
        let mut tape = Tape::new(&store);
        let h = tape.leaf(x);
        let y = merge_inner_trans(&mut tape, h, &[true, false, false, false], &cfg(2), &p).unwrap();
        assert_eq!(&tape.value(y).row(0)[..2], &[0.0, 0.0]);
        assert_eq!(merged_pad(&[true, true, true, false], 2), vec![true, false]);
    }

    #[test]
    fn param_count_and_counter() {
        let mut store = ParamStore::new();
        let mut rng = substream(0, "pc");
        InnerTransParams::new(&mut store, 32, 1, &mut rng);
        assert_eq!(store.scalar_count(), 12 * 32 * 32 + 13 * 32);

        let (store, p) = inner(4, 1, 7);
        let mut rng = substream(7, "x");
        let mut tape = Tape::new(&store);
        let h = tape.leaf(random(&mut rng, 12, 4));
        merge_inner_trans(&mut tape, h, &[false; 12], &cfg(3), &p).unwrap();
        assert_eq!(tape.ops().mul_adds(), InnerTransParams::mul_adds(4, 3, 4, 1));
    }
}
