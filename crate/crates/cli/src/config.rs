//! Run configuration: a flat JSON file overlaid with command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use st_tree_core::{EncoderConfig, Error, ModelConfig, Result, TrainConfig, TreeConfig};

pub const DATA_ENV: &str = "ST_TREE_DATA";
pub const DEFAULT_DATA_ROOT: &str = "data";
pub const DEFAULT_DATASET: &str = "BasicMotions";
pub const DEFAULT_OUT: &str = "runs";

/// Contents of a `--config` file. Every key is optional; `train.seed`
/// seeds both parameter initialization and batch order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data_root: Option<PathBuf>,
    pub dataset: Option<String>,
    pub out: Option<PathBuf>,
    pub no_tree: bool,
    pub no_attention: bool,
    pub fine_tune_from: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub tree: TreeConfig,
    pub train: TrainConfig,
}

impl FileConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Values given on the command line; `None`/`false` means "not given".
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_root: Option<PathBuf>,
    pub dataset: Option<String>,
    pub depth: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_tree: bool,
    pub no_attention: bool,
    pub fine_tune_from: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub dataset: String,
    pub out: PathBuf,
    pub no_tree: bool,
    pub no_attention: bool,
    pub fine_tune_from: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub tree: TreeConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Flag, then config file, then `ST_TREE_DATA` (data root only), then
    /// the built-in default.
    pub fn resolve(file: FileConfig, flags: &Overrides, env_data_root: Option<PathBuf>) -> Result<Self> {
        let mut cfg = Self {
            data_root: flags
                .data_root
                .clone()
                .or(file.data_root)
                .or(env_data_root)
                .unwrap_or_else(|| DEFAULT_DATA_ROOT.into()),
            dataset: flags
                .dataset
                .clone()
                .or(file.dataset)
                .unwrap_or_else(|| DEFAULT_DATASET.into()),
            out: flags.out.clone().or(file.out).unwrap_or_else(|| DEFAULT_OUT.into()),
            no_tree: flags.no_tree || file.no_tree,
            no_attention: flags.no_attention || file.no_attention,
            fine_tune_from: flags.fine_tune_from.clone().or(file.fine_tune_from),
            encoder: file.encoder,
            tree: file.tree,
            train: file.train,
        };
        if let Some(d) = flags.depth {
            cfg.tree.depth = d;
        }
        if let Some(e) = flags.epochs {
            cfg.train.epochs = e;
        }
        if let Some(s) = flags.seed {
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `--config` if given and applies the flags and environment.
    pub fn load(config: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let file = match config {
            Some(p) => FileConfig::read(p)?,
            None => FileConfig::default(),
        };
        let env = std::env::var_os(DATA_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        Self::resolve(file, flags, env)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if self.tree.depth == 0 {
            return Err(Error::Config("tree.depth must be at least 1".into()));
        }
        if self.tree.proto_size == 0 {
            return Err(Error::Config("tree.proto_size must be positive".into()));
        }
        if self.tree.attention_kernel.is_multiple_of(2) {
            return Err(Error::Config("tree.attention_kernel must be odd".into()));
        }
        if self.dataset.is_empty() {
            return Err(Error::Config("dataset name is empty".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, num_channels: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_channels,
            num_classes,
            encoder: self.encoder.clone(),
            tree: self.tree.clone(),
            no_tree: self.no_tree,
            no_attention: self.no_attention,
            seed: self.train.seed,
        }
    }
}
