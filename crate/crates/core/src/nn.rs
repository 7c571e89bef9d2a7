use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// `<prefix>.weight: [fan_in, fan_out]` (Glorot uniform) and
    /// `<prefix>.bias: [fan_out]` (zeros).
    pub fn register(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, seed: u64) -> Self {
        let name = format!("{prefix}.weight");
        let mut r = rng::stream(seed, rng::name_hash(&name));
        let weight = store.insert(name, rng::glorot(fan_in, fan_out, &mut r));
        let bias = store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gain = store.insert(format!("{prefix}.gain"), Tensor::full(&[dim], 1.0));
        let bias = store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}
