use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{encoder_forward, EncoderConfig, EncoderOutput, EncoderParams};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tree::{traverse, Traversal, TreeConfig, TreeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_channels: usize,
    pub num_classes: usize,
    pub encoder: EncoderConfig,
    pub tree: TreeConfig,
    /// Score `softmax(logits)` directly, skipping the tree.
    #[serde(default)]
    pub no_tree: bool,
    /// Replace every attention block with the identity.
    #[serde(default)]
    pub no_attention: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(num_channels: usize, num_classes: usize) -> Self {
        Self {
            num_channels,
            num_classes,
            encoder: EncoderConfig::default(),
            tree: TreeConfig::default(),
            no_tree: false,
            no_attention: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    /// Absent when the tree is ablated.
    pub tree: Option<TreeParams>,
}

pub struct Forward {
    pub encoder: EncoderOutput,
    pub traversal: Option<Traversal>,
    /// `[B, M]` class probabilities.
    pub probs: Var,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.num_channels == 0 || config.num_classes == 0 {
            return Err(Error::Config("model needs at least one channel and one class".into()));
        }
        let mut store = ParamStore::new();
        let encoder = EncoderParams::register(
            &mut store,
            &config.encoder,
            config.num_channels,
            config.num_classes,
            config.seed,
        )?;
        let tree = if config.no_tree {
            None
        } else {
            Some(TreeParams::register(
                &mut store,
                &config.tree,
                config.encoder.embed_dim,
                config.num_classes,
                config.seed,
            )?)
        };
        Ok(Self {
            config,
            store,
            encoder,
            tree,
        })
    }

    /// Records a full forward pass of `x: [B, C, T]` on `tape`.
    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Forward> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.config.num_channels {
            return Err(Error::Shape {
                op: "model input",
                lhs: s.to_vec(),
                rhs: vec![0, self.config.num_channels, 0],
            });
        }
        let use_attention = !self.config.no_attention;
        let x = tape.constant(x);
        let enc = encoder_forward(tape, &self.store, &self.encoder, &self.config.encoder, x, use_attention)?;
        match &self.tree {
            Some(tree) => {
                let t = traverse(tape, &self.store, tree, enc.patches, enc.logits, use_attention)?;
                Ok(Forward {
                    probs: t.y_hat,
                    encoder: enc,
                    traversal: Some(t),
                })
            }
            None => {
                let probs = tape.softmax(enc.logits, 1)?;
                Ok(Forward {
                    encoder: enc,
                    traversal: None,
                    probs,
                })
            }
        }
    }

    /// Class probabilities per sample, without keeping the tape.
    pub fn predict_proba(&self, x: Tensor) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, x)?;
        let m = self.config.num_classes;
        Ok(tape.data(f.probs).chunks(m).map(<[f64]>::to_vec).collect())
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
