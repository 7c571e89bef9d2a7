//! Command-line front end: `train`, `evaluate`, `explain`, `gradcheck`,
//! `sweep-depth` and `ablate`.

pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use st_tree_core::{Error, Result};

use crate::commands::CHECKPOINT_FILE;
use crate::config::{Overrides, RunConfig, DATA_ENV, DEFAULT_DATA_ROOT, DEFAULT_OUT};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "st-tree", version, about = "Shifted-window encoder with a prototype decision tree for multivariate time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write model.ckpt and metrics.csv.
    Train(RunArgs),
    /// Report test accuracy of a checkpoint.
    Evaluate(InferArgs),
    /// Write decision paths (JSON) and tree figures (SVG) for test samples.
    Explain(ExplainArgs),
    /// Compare tape gradients of a tiny model with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train depths 3 to 6 and write sweep.csv.
    SweepDepth(RunArgs),
    /// Train the full model and both ablations and write ablation.csv.
    Ablate(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding `<name>/<name>_TRAIN.ts`; falls back to $ST_TREE_DATA.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_tree: bool,
    #[arg(long)]
    pub no_attention: bool,
    /// Start from the encoder of this checkpoint.
    #[arg(long)]
    pub fine_tune_from: Option<PathBuf>,
}

impl RunArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            data_root: self.data_root.clone(),
            dataset: self.dataset.clone(),
            depth: self.depth,
            epochs: self.epochs,
            seed: self.seed,
            out: self.out.clone(),
            no_tree: self.no_tree,
            no_attention: self.no_attention,
            fine_tune_from: self.fine_tune_from.clone(),
        }
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    /// Checkpoint to load; defaults to `<out>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Defaults to the dataset recorded in the checkpoint.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl InferArgs {
    fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| DEFAULT_OUT.into())
    }

    fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out().join(CHECKPOINT_FILE))
    }

    fn data_root(&self) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| DEFAULT_DATA_ROOT.into())
    }

    fn load(&self) -> Result<commands::Loaded> {
        commands::load_for_inference(&self.checkpoint(), &self.data_root(), self.dataset.as_deref())
    }
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: InferArgs,
    /// Test-set indices to explain.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub samples: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    /// Series length of the random batch (a multiple of 4).
    #[arg(long, default_value_t = 16)]
    pub length: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Partition { .. }
        | Error::DegenerateTree
        | Error::KernelTooLong { .. }
        | Error::Shape { .. }
        | Error::Rank { .. }
        | Error::EmptyTensor { .. } => EXIT_CONFIG,
        Error::Data(_)
        | Error::Format { .. }
        | Error::UnknownLabel { .. }
        | Error::LabelOutOfRange { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::Checkpoint(_)
        | Error::Transfer(_) => EXIT_DATA,
        Error::NumericAbort(_) | Error::NanInput { .. } | Error::Domain { .. } | Error::Explain(_) => EXIT_NUMERIC,
    }
}

/// Runs one command, printing results to `out`. Returns the exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let r = commands::cmd_train(&cfg)?;
            for e in &r.report.history {
                let val = e.val_acc.map_or(String::new(), |v| format!(" val_acc {v:.4}"));
                writeln!(
                    out,
                    "epoch {:>3} lr {:.3e} loss {:.4} train_acc {:.4}{val}",
                    e.epoch, e.lr, e.train_loss, e.train_acc
                )?;
            }
            if r.report.stopped_early {
                writeln!(out, "stopped early; kept epoch {}", r.report.best_epoch)?;
            }
            writeln!(out, "wrote {} and {}", r.checkpoint.display(), r.metrics.display())?;
            writeln!(out, "test_accuracy {:.4}", r.test.accuracy)?;
            Ok(0)
        }
        Command::Evaluate(args) => {
            let loaded = args.load()?;
            let e = commands::cmd_evaluate(&loaded)?;
            for (name, acc) in loaded.data.test.class_names.iter().zip(&e.per_class_accuracy) {
                if let Some(a) = acc {
                    writeln!(out, "class {name} accuracy {a:.4}")?;
                }
            }
            writeln!(out, "mean_loss {:.6}", e.mean_loss)?;
            writeln!(out, "test_accuracy {:.4}", e.accuracy)?;
            Ok(0)
        }
        Command::Explain(args) => {
            let loaded = args.common.load()?;
            for p in commands::cmd_explain(&loaded, &args.samples, &args.common.out())? {
                writeln!(out, "wrote {}", p.display())?;
            }
            Ok(0)
        }
        Command::Gradcheck(args) => {
            let report = commands::cmd_gradcheck(args.seed, args.depth, args.length)?;
            for t in &report.tensors {
                writeln!(out, "{:<40} {:>5} probes  max rel err {:.3e}", t.name, t.probes, t.max_rel_err)?;
            }
            let ok = report.max_rel_err < args.tolerance;
            writeln!(
                out,
                "max_rel_err {:.3e} ({} tolerance {:.0e})",
                report.max_rel_err,
                if ok { "within" } else { "EXCEEDS" },
                args.tolerance
            )?;
            Ok(if ok { 0 } else { EXIT_NUMERIC })
        }
        Command::SweepDepth(args) => {
            let cfg = args.resolve()?;
            writeln!(out, "depth,leaves,train_acc,test_acc")?;
            for r in commands::cmd_sweep_depth(&cfg)? {
                writeln!(out, "{},{},{:.4},{:.4}", r.depth, r.leaves, r.train_acc, r.test_acc)?;
            }
            writeln!(out, "wrote {}", cfg.out.join(commands::SWEEP_FILE).display())?;
            Ok(0)
        }
        Command::Ablate(args) => {
            let cfg = args.resolve()?;
            writeln!(out, "variant,test_acc")?;
            for r in commands::cmd_ablate(&cfg)? {
                writeln!(out, "{},{:.4}", r.variant, r.test_acc)?;
            }
            writeln!(out, "wrote {}", cfg.out.join(commands::ABLATION_FILE).display())?;
            Ok(0)
        }
    }
}

/// Parses `args` (program name first), runs the command and maps errors to
/// exit codes, reporting them on stderr.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match run(cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
