//! Time-patch encoder: partition the series into patches of `4n`
//! neighbouring timestamps, embed them, then run windowed self-attention
//! once without and once with a half-window cyclic shift.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_apply, AttentionParams};
use crate::autodiff::{Tape, Var, Window};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// `n`; each patch covers `4n` timestamps.
    pub partition_factor: usize,
    pub embed_dim: usize,
    /// Window size in patches.
    pub window_size: usize,
    pub mlp_hidden: usize,
    pub attention_kernel: usize,
    /// Number of (plain, shifted) block pairs.
    pub layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            partition_factor: 1,
            embed_dim: 64,
            window_size: 4,
            mlp_hidden: 128,
            attention_kernel: 3,
            layers: 1,
        }
    }
}

impl EncoderConfig {
    pub fn patch_width(&self) -> usize {
        4 * self.partition_factor
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("partition_factor", self.partition_factor),
            ("embed_dim", self.embed_dim),
            ("window_size", self.window_size),
            ("mlp_hidden", self.mlp_hidden),
            ("layers", self.layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        if self.attention_kernel.is_multiple_of(2) {
            return Err(Error::Config("encoder.attention_kernel must be odd".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub shift: bool,
    pub q_attn: AttentionParams,
    pub k_attn: AttentionParams,
    pub v_attn: AttentionParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub ln1: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub ln2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub patch_embed: Linear,
    pub blocks: Vec<BlockParams>,
    pub head: Linear,
}

pub const PATCH_EMBED_PREFIX: &str = "encoder.patch_embed";

impl EncoderParams {
    pub fn register(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        channels: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_embed = Linear::register(store, PATCH_EMBED_PREFIX, cfg.patch_width() * channels, d, seed);
        let mut blocks = Vec::with_capacity(2 * cfg.layers);
        for j in 0..2 * cfg.layers {
            let p = format!("encoder.block{j}");
            let a = cfg.attention_kernel;
            blocks.push(BlockParams {
                shift: j % 2 == 1,
                q_attn: AttentionParams::register(store, &format!("{p}.q_attn"), a, seed)?,
                k_attn: AttentionParams::register(store, &format!("{p}.k_attn"), a, seed)?,
                v_attn: AttentionParams::register(store, &format!("{p}.v_attn"), a, seed)?,
                q: Linear::register(store, &format!("{p}.q"), d, d, seed),
                k: Linear::register(store, &format!("{p}.k"), d, d, seed),
                v: Linear::register(store, &format!("{p}.v"), d, d, seed),
                ln1: LayerNorm::register(store, &format!("{p}.ln1"), d),
                mlp_in: Linear::register(store, &format!("{p}.mlp_in"), d, cfg.mlp_hidden, seed),
                mlp_out: Linear::register(store, &format!("{p}.mlp_out"), cfg.mlp_hidden, d, seed),
                ln2: LayerNorm::register(store, &format!("{p}.ln2"), d),
            });
        }
        let head = Linear::register(store, "encoder.head", d, classes, seed);
        Ok(Self {
            patch_embed,
            blocks,
            head,
        })
    }
}

pub struct EncoderOutput {
    /// `[B, P, D]`
    pub patches: Var,
    /// `[B, M]`
    pub logits: Var,
}

/// `[B, C, T]` → `[B, T/w, w·C]` with feature `k·C + c` of patch `p`
/// holding `x[b, c, w·p + k]`.
pub fn time_partition(tape: &mut Tape, x: Var, width: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, c, t) = (s[0], s[1], s[2]);
    if t == 0 || t % width != 0 {
        return Err(Error::Partition { len: t, multiple: width });
    }
    let xt = tape.transpose(x)?;
    tape.reshape(xt, &[b, t / width, width * c])
}

/// Gather order that rotates a length-`p` sequence left by `s`.
pub fn shift_index(p: usize, s: usize) -> Vec<usize> {
    (0..p).map(|i| (i + s) % p).collect()
}

/// Inverse of [`shift_index`].
pub fn unshift_index(p: usize, s: usize) -> Vec<usize> {
    (0..p).map(|i| (i + p - s % p) % p).collect()
}

/// Q/K/V refinement for one projection: attention over `[G, D, w]`.
fn refine(tape: &mut Tape, store: &ParamStore, attn: Option<&AttentionParams>, x: Var) -> Result<Var> {
    match attn {
        None => Ok(x),
        Some(p) => {
            let xt = tape.transpose(x)?;
            let y = attention_apply(tape, store, p, xt)?;
            tape.transpose(y)
        }
    }
}

/// Dense scaled dot-product attention inside each window of `g: [G, w, D]`.
fn attend(tape: &mut Tape, store: &ParamStore, blk: &BlockParams, g: Var, use_attention: bool) -> Result<Var> {
    let d = *tape.shape(g).last().unwrap();
    let pick = |p: &AttentionParams| use_attention.then_some(*p);
    let qa = pick(&blk.q_attn);
    let ka = pick(&blk.k_attn);
    let va = pick(&blk.v_attn);
    let q_in = refine(tape, store, qa.as_ref(), g)?;
    let k_in = refine(tape, store, ka.as_ref(), g)?;
    let v_in = refine(tape, store, va.as_ref(), g)?;
    let q = blk.q.forward(tape, store, q_in)?;
    let k = blk.k.forward(tape, store, k_in)?;
    let v = blk.v.forward(tape, store, v_in)?;
    let kt = tape.transpose(k)?;
    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax(scores, 2)?;
    tape.bmm(weights, v)
}

/// One windowed block on `h: [B, P, D]`: attention, residual, LN, MLP,
/// residual, LN. Windows never mix; a short final window is attended
/// as-is.
pub fn window_self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    blk: &BlockParams,
    h: Var,
    window: usize,
    use_attention: bool,
) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    let (b, p, d) = (s[0], s[1], s[2]);
    let w = window.clamp(1, p);
    let shift = if blk.shift { w / 2 } else { 0 };
    let rolled = if shift > 0 {
        tape.index_select(h, 1, &shift_index(p, shift))?
    } else {
        h
    };

    let full = p / w;
    let rest = p - full * w;
    let mut parts = Vec::with_capacity(2);
    if full > 0 {
        let idx: Vec<usize> = (0..full * w).collect();
        let body = if rest > 0 { tape.index_select(rolled, 1, &idx)? } else { rolled };
        let grouped = tape.reshape(body, &[b * full, w, d])?;
        let out = attend(tape, store, blk, grouped, use_attention)?;
        parts.push(tape.reshape(out, &[b, full * w, d])?);
    }
    if rest > 0 {
        let idx: Vec<usize> = (full * w..p).collect();
        let tail = tape.index_select(rolled, 1, &idx)?;
        parts.push(attend(tape, store, blk, tail, use_attention)?);
    }
    let mixed = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 1)? };
    let attended = if shift > 0 {
        tape.index_select(mixed, 1, &unshift_index(p, shift))?
    } else {
        mixed
    };

    let res = tape.add(h, attended)?;
    let x = blk.ln1.forward(tape, store, res)?;
    let hidden = blk.mlp_in.forward(tape, store, x)?;
    let hidden = tape.relu(hidden);
    let y = blk.mlp_out.forward(tape, store, hidden)?;
    let res = tape.add(x, y)?;
    blk.ln2.forward(tape, store, res)
}

/// `x: [B, C, T]` (T already a multiple of `4n`) → patches and logits.
pub fn encoder_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    x: Var,
    use_attention: bool,
) -> Result<EncoderOutput> {
    let raw = time_partition(tape, x, cfg.patch_width())?;
    let mut h = params.patch_embed.forward(tape, store, raw)?;
    for blk in &params.blocks {
        h = window_self_attention(tape, store, blk, h, cfg.window_size, use_attention)?;
    }
    let s = tape.shape(h).to_vec();
    let ht = tape.transpose(h)?;
    let pooled = tape.avgpool1d(ht, Window::Global)?;
    let pooled = tape.reshape(pooled, &[s[0], s[2]])?;
    let logits = params.head.forward(tape, store, pooled)?;
    Ok(EncoderOutput { patches: h, logits })
}
