use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use st_tree_core::checkpoint::{self, DataInfo};
use st_tree_core::data::{load_pair, prepare};
use st_tree_core::explain::{explain, export_json, render_tree_svg, FigureInput};
use st_tree_core::gradcheck::{check_model, tiny_batch_of_length, tiny_config, GradcheckReport};
use st_tree_core::trainer::{evaluate, fine_tune, fit, Evaluation, TrainReport};
use st_tree_core::{Dataset, Error, Model, NormStats, Result};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const EXPLAIN_DIR: &str = "explain";
pub const SWEEP_DEPTHS: [usize; 4] = [3, 4, 5, 6];

/// Raw splits as parsed plus the normalized, padded copies fed to the model.
pub struct Prepared {
    pub raw_train: Dataset,
    pub raw_test: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub stats: NormStats,
}

impl Prepared {
    pub fn load(root: &Path, name: &str, width: usize) -> Result<Self> {
        let (raw_train, raw_test) = load_pair(root, name)?;
        let (train, test, stats) = prepare(&raw_train, &raw_test, width);
        Ok(Self {
            raw_train,
            raw_test,
            train,
            test,
            stats,
        })
    }

    pub fn info(&self) -> DataInfo {
        DataInfo {
            dataset: self.raw_train.name.clone(),
            class_names: self.raw_train.class_names.clone(),
            mean: self.stats.mean.clone(),
            std: self.stats.std.clone(),
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    for r in rows {
        w.serialize(r).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Builds a model for `data` and trains it (from scratch, or from the
/// encoder of `cfg.fine_tune_from`).
pub fn train_model(cfg: &RunConfig, data: &Prepared) -> Result<(Model, TrainReport)> {
    let mcfg = cfg.model_config(data.train.num_channels, data.train.num_classes());
    let mut model = Model::new(mcfg)?;
    let report = match &cfg.fine_tune_from {
        Some(path) => {
            let (pre, _) = checkpoint::load(path)?;
            fine_tune(&mut model, &pre.store, &data.train, &cfg.train)?
        }
        None => fit(&mut model, &data.train, &cfg.train)?,
    };
    Ok((model, report))
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub test: Evaluation,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let data = Prepared::load(&cfg.data_root, &cfg.dataset, cfg.encoder.patch_width())?;
    let (model, report) = train_model(cfg, &data)?;
    let test = evaluate(&model, &data.test)?;
    fs::create_dir_all(&cfg.out)?;
    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    checkpoint::save(&model, Some(&data.info()), &checkpoint)?;
    let metrics = cfg.out.join(METRICS_FILE);
    write_csv(&metrics, &report.history)?;
    Ok(TrainOutcome {
        report,
        test,
        checkpoint,
        metrics,
    })
}

/// A trained model with the dataset it should be applied to, normalized
/// with the statistics stored in its checkpoint.
pub struct Loaded {
    pub model: Model,
    pub data: Prepared,
}

pub fn load_for_inference(ckpt: &Path, root: &Path, dataset: Option<&str>) -> Result<Loaded> {
    let (model, info) = checkpoint::load(ckpt)?;
    let name = dataset
        .map(str::to_string)
        .or_else(|| info.as_ref().map(|i| i.dataset.clone()))
        .ok_or_else(|| Error::Config("checkpoint names no dataset; pass --dataset".into()))?;
    let width = model.config.encoder.patch_width();
    let mut data = Prepared::load(root, &name, width)?;
    if let Some(info) = info {
        if info.class_names != data.raw_train.class_names {
            return Err(Error::Data(format!(
                "{name} classes {:?} differ from the checkpoint's {:?}",
                data.raw_train.class_names, info.class_names
            )));
        }
        let stats = NormStats {
            mean: info.mean,
            std: info.std,
        };
        if stats.mean.len() != data.raw_train.num_channels {
            return Err(Error::Data(format!(
                "{name} has {} channels, the checkpoint was trained on {}",
                data.raw_train.num_channels,
                stats.mean.len()
            )));
        }
        data.train = data.raw_train.z_normalize(Some(&stats)).0.pad_to_multiple(width);
        data.test = data.raw_test.z_normalize(Some(&stats)).0.pad_to_multiple(width);
        data.stats = stats;
    }
    if data.train.num_channels != model.config.num_channels || data.train.num_classes() != model.config.num_classes {
        return Err(Error::Data(format!(
            "{name} has {} channels and {} classes, the model expects {} and {}",
            data.train.num_channels,
            data.train.num_classes(),
            model.config.num_channels,
            model.config.num_classes
        )));
    }
    Ok(Loaded { model, data })
}

pub fn cmd_evaluate(loaded: &Loaded) -> Result<Evaluation> {
    evaluate(&loaded.model, &loaded.data.test)
}

/// Writes `<out>/explain/<sample>.json` and `.svg` for each test sample.
pub fn cmd_explain(loaded: &Loaded, samples: &[usize], out: &Path) -> Result<Vec<PathBuf>> {
    let test = &loaded.data.test;
    let raw = &loaded.data.raw_test;
    if let Some(&bad) = samples.iter().find(|&&s| s >= test.len()) {
        return Err(Error::Config(format!("sample {bad} out of range (test set has {})", test.len())));
    }
    let dir = out.join(EXPLAIN_DIR);
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for &s in samples {
        let inst = &test.instances[s];
        let path = explain(&loaded.model, &inst.values, inst.raw_len, inst.label, s)?;
        let json = dir.join(format!("{s}.json"));
        export_json(&path, &json)?;
        let fig = FigureInput {
            sample_id: s,
            raw: &raw.instances[s].values,
            raw_len: inst.raw_len,
            model_input: &inst.values,
        };
        let svg = render_tree_svg(&loaded.model, &[fig], &test.class_names)?;
        let svg_path = dir.join(format!("{s}.svg"));
        fs::write(&svg_path, svg)?;
        written.push(json);
        written.push(svg_path);
    }
    Ok(written)
}

pub fn cmd_gradcheck(seed: u64, depth: usize, length: usize) -> Result<GradcheckReport> {
    let mut cfg = tiny_config(seed);
    cfg.tree.depth = depth;
    let mut model = Model::new(cfg)?;
    let (x, y) = tiny_batch_of_length(seed, length);
    check_model(&mut model, &x, &y, None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub depth: usize,
    pub leaves: usize,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Trains one model per depth in [`SWEEP_DEPTHS`] and writes `sweep.csv`.
pub fn cmd_sweep_depth(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let data = Prepared::load(&cfg.data_root, &cfg.dataset, cfg.encoder.patch_width())?;
    let mut rows = Vec::new();
    for depth in SWEEP_DEPTHS {
        let mut c = cfg.clone();
        c.tree.depth = depth;
        c.no_tree = false;
        let (model, _) = train_model(&c, &data)?;
        rows.push(SweepRow {
            depth,
            leaves: 1 << depth,
            train_acc: evaluate(&model, &data.train)?.accuracy,
            test_acc: evaluate(&model, &data.test)?.accuracy,
        });
    }
    fs::create_dir_all(&cfg.out)?;
    write_csv(&cfg.out.join(SWEEP_FILE), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub test_acc: f64,
}

/// Trains the full model and the two ablations under one seed and
/// writes `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let data = Prepared::load(&cfg.data_root, &cfg.dataset, cfg.encoder.patch_width())?;
    let mut rows = Vec::new();
    for (variant, no_tree, no_attention) in [("full", false, false), ("no_tree", true, false), ("no_attention", false, true)] {
        let mut c = cfg.clone();
        c.no_tree = no_tree;
        c.no_attention = no_attention;
        let (model, _) = train_model(&c, &data)?;
        rows.push(AblationRow {
            variant: variant.into(),
            test_acc: evaluate(&model, &data.test)?.accuracy,
        });
    }
    fs::create_dir_all(&cfg.out)?;
    write_csv(&cfg.out.join(ABLATION_FILE), &rows)?;
    Ok(rows)
}
