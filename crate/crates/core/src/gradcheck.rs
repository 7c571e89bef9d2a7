//! Central finite-difference check of the tape gradients of a full model.

use crate::autodiff::Tape;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::rng;
use crate::tensor::Tensor;
use crate::trainer::cross_entropy;
use crate::{EncoderConfig, TreeConfig};

pub const STEP: f64 = 1e-5;
/// Magnitudes below this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Config of the small model used for the check: 2 channels, 16 steps,
/// embedding 8, depth 2, prototypes of length 2, 3 classes.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_channels: 2,
        num_classes: 3,
        encoder: EncoderConfig {
            embed_dim: 8,
            mlp_hidden: 16,
            window_size: 2,
            ..EncoderConfig::default()
        },
        tree: TreeConfig {
            depth: 2,
            proto_size: 2,
            ..TreeConfig::default()
        },
        no_tree: false,
        no_attention: false,
        seed,
    }
}

/// A random batch of two `[2, 16]` series with labels.
pub fn tiny_batch(seed: u64) -> (Tensor, Vec<usize>) {
    tiny_batch_of_length(seed, 16)
}

/// Two `[2, len]` series drawn from U(-2, 2), labelled 0 and 2.
pub fn tiny_batch_of_length(seed: u64, len: usize) -> (Tensor, Vec<usize>) {
    let mut r = rng::stream(seed, rng::name_hash("gradcheck.batch"));
    (rng::uniform(&[2, 2, len], -2.0, 2.0, &mut r), vec![0, 2])
}

fn loss_of(model: &Model, x: &Tensor, y: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, x.clone())?;
    let l = cross_entropy(&mut tape, f.probs, y)?;
    Ok(tape.value(l).item())
}

/// Compares tape gradients of the cross-entropy loss with central
/// differences. `max_probes` limits the entries tried per tensor (evenly
/// strided); `None` checks every entry.
pub fn check_model(model: &mut Model, x: &Tensor, y: &[usize], max_probes: Option<usize>) -> Result<GradcheckReport> {
    model.store.zero_grad();
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, x.clone())?;
    let l = cross_entropy(&mut tape, f.probs, y)?;
    tape.backward(l, &mut model.store)?;
    let analytic: Vec<Vec<f64>> = model
        .store
        .iter()
        .map(|(_, _, t)| t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    model.store.zero_grad();

    let ids: Vec<_> = model.store.iter().map(|(id, name, t)| (id, name.to_string(), t.numel())).collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for (k, (id, name, n)) in ids.into_iter().enumerate() {
        let stride = max_probes.map_or(1, |p| n.div_ceil(p.max(1)));
        let mut worst: f64 = 0.0;
        let mut probes = 0;
        for e in (0..n).step_by(stride) {
            let orig = model.store.get(id).data()[e];
            model.store.get_mut(id).data_mut()[e] = orig + STEP;
            let up = loss_of(model, x, y)?;
            model.store.get_mut(id).data_mut()[e] = orig - STEP;
            let down = loss_of(model, x, y)?;
            model.store.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[k][e], numeric));
            probes += 1;
        }
        tensors.push(TensorCheck {
            name,
            probes,
            max_rel_err: worst,
        });
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { tensors, max_rel_err })
}
