use rand::Rng;

use super::{NodeId, ParamId, ParamStore, Tape};
use crate::error::Result;

/// Affine map `x·w + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weights drawn from `N(0, 1/fan_in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: store.normal(format!("{}.w", name), &[fan_in, fan_out], std, rng),
            b: store.zeros(format!("{}.b", name), &[fan_out]),
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.zeros(format!("{}.w", name), &[fan_in, fan_out]),
            b: store.zeros(format!("{}.b", name), &[fan_out]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.linear(x, self.w, self.b)
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

/// One-hidden-layer GELU perceptron.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, &format!("{}.fc1", name), fan_in, hidden, rng),
            out: Linear::new(store, &format!("{}.fc2", name), hidden, fan_out, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.gelu(h);
        self.out.forward(tape, h)
    }

    pub fn param_count(fan_in: usize, hidden: usize, fan_out: usize) -> usize {
        Linear::param_count(fan_in, hidden) + Linear::param_count(hidden, fan_out)
    }

    pub fn mul_adds(rows: usize, fan_in: usize, hidden: usize, fan_out: usize) -> u64 {
        (rows * (fan_in * hidden + hidden * fan_out)) as u64
    }
}
