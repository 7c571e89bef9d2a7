//! Channel-then-spatial attention over `[B, C, L]` features.
//!
//! Both maps come from a `[avg; max]` descriptor pair stacked as two
//! pseudo-channels and passed through a size-`a` 1-D convolution with
//! zero "same" padding, then a sigmoid.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Padding, Tape, Var, Window};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub channel_kernel: ParamId,
    pub spatial_kernel: ParamId,
    pub kernel_size: usize,
}

impl AttentionParams {
    /// Registers `<prefix>.channel_kernel` and `<prefix>.spatial_kernel`,
    /// both `[1, 2, a]`.
    pub fn register(store: &mut ParamStore, prefix: &str, kernel_size: usize, seed: u64) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("attention kernel size must be odd, got {kernel_size}")));
        }
        let mut init = |name: String| {
            let mut r: ChaCha8Rng = rng::stream(seed, rng::name_hash(&name));
            let bound = 1.0 / ((2 * kernel_size) as f64).sqrt();
            store.insert(name, rng::uniform(&[1, 2, kernel_size], -bound, bound, &mut r))
        };
        let channel_kernel = init(format!("{prefix}.channel_kernel"));
        let spatial_kernel = init(format!("{prefix}.spatial_kernel"));
        Ok(Self {
            channel_kernel,
            spatial_kernel,
            kernel_size,
        })
    }
}

/// Stacks the average and maximum of `x: [B, N, M]` over its last axis
/// as a `[B, 2, N]` descriptor.
fn pooled_descriptor(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let avg = tape.avgpool1d(x, Window::Global)?;
    let max = tape.maxpool1d(x, Window::Global)?;
    let avg = tape.reshape(avg, &[s[0], 1, s[1]])?;
    let max = tape.reshape(max, &[s[0], 1, s[1]])?;
    tape.concat(&[avg, max], 1)
}

/// `[B, C, L]` → `[B, C, 1]` weights in (0, 1).
pub fn channel_attention(tape: &mut Tape, store: &ParamStore, p: &AttentionParams, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let desc = pooled_descriptor(tape, x)?;
    let kernel = tape.param(store, p.channel_kernel);
    let conv = tape.conv1d(desc, kernel, Padding::Same)?;
    let gate = tape.sigmoid(conv);
    tape.reshape(gate, &[s[0], s[1], 1])
}

/// `[B, C, L]` → `[B, 1, L]` weights in (0, 1).
pub fn spatial_attention(tape: &mut Tape, store: &ParamStore, p: &AttentionParams, x: Var) -> Result<Var> {
    let xt = tape.transpose(x)?;
    let desc = pooled_descriptor(tape, xt)?;
    let kernel = tape.param(store, p.spatial_kernel);
    let conv = tape.conv1d(desc, kernel, Padding::Same)?;
    Ok(tape.sigmoid(conv))
}

/// `z ⊙ ca(z) ⊙ sa(z ⊙ ca(z))`; shape preserving.
pub fn attention_apply(tape: &mut Tape, store: &ParamStore, p: &AttentionParams, z: Var) -> Result<Var> {
    let ca = channel_attention(tape, store, p, z)?;
    let zc = tape.mul(z, ca)?;
    let sa = spatial_attention(tape, store, p, zc)?;
    tape.mul(zc, sa)
}
