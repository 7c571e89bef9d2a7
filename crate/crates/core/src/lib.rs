//! Prototype-routed neural decision trees over a shifted-window
//! attention encoder, for multivariate time-series classification.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod tree;

pub use autodiff::{Gradients, Padding, Tape, Var, Window};
pub use data::{Dataset, Instance, NormStats, Split};
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
pub use trainer::TrainConfig;
pub use tree::TreeConfig;
