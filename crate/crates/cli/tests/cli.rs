use std::path::{Path, PathBuf};

use st_tree_cli::config::{FileConfig, Overrides, RunConfig};
use st_tree_cli::{exit_code, main_with_args, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC};
use st_tree_core::checkpoint;
use st_tree_core::explain::from_json;
use st_tree_core::Error;

fn data_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = main_with_args(std::iter::once("st-tree").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn file_config() -> FileConfig {
    serde_json::from_str(
        r#"{
            "data_root": "from-file",
            "dataset": "FileSet",
            "out": "file-out",
            "no_tree": false,
            "no_attention": false,
            "fine_tune_from": "file.ckpt",
            "encoder": {"embed_dim": 32},
            "tree": {"depth": 5, "proto_size": 2},
            "train": {"epochs": 7, "seed": 3, "learning_rate": 0.01}
        }"#,
    )
    .unwrap()
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let file = file_config();
    let from_file = RunConfig::resolve(file.clone(), &Overrides::default(), Some("from-env".into())).unwrap();
    assert_eq!(from_file.data_root, PathBuf::from("from-file"));
    assert_eq!(from_file.dataset, "FileSet");
    assert_eq!(from_file.out, PathBuf::from("file-out"));
    assert_eq!(from_file.fine_tune_from, Some(PathBuf::from("file.ckpt")));
    assert_eq!((from_file.tree.depth, from_file.tree.proto_size), (5, 2));
    assert_eq!((from_file.train.epochs, from_file.train.seed), (7, 3));
    assert_eq!(from_file.train.learning_rate, 0.01);
    assert_eq!(from_file.encoder.embed_dim, 32);
    assert_eq!(from_file.encoder.window_size, 4);

    let flags = Overrides {
        data_root: Some("flag-root".into()),
        dataset: Some("FlagSet".into()),
        depth: Some(4),
        epochs: Some(2),
        seed: Some(9),
        out: Some("flag-out".into()),
        no_tree: true,
        no_attention: true,
        fine_tune_from: Some("flag.ckpt".into()),
    };
    let c = RunConfig::resolve(file, &flags, Some("from-env".into())).unwrap();
    assert_eq!(c.data_root, PathBuf::from("flag-root"));
    assert_eq!(c.dataset, "FlagSet");
    assert_eq!(c.out, PathBuf::from("flag-out"));
    assert_eq!(c.fine_tune_from, Some(PathBuf::from("flag.ckpt")));
    assert_eq!(c.tree.depth, 4);
    assert_eq!(c.tree.proto_size, 2);
    assert_eq!(c.train.epochs, 2);
    assert_eq!(c.train.seed, 9);
    assert!(c.no_tree && c.no_attention);
    assert_eq!(c.model_config(6, 4).seed, 9);

    let d = RunConfig::resolve(FileConfig::default(), &Overrides::default(), None).unwrap();
    assert_eq!(d.data_root, PathBuf::from("data"));
    assert_eq!(d.dataset, "BasicMotions");
    assert_eq!(d.out, PathBuf::from("runs"));
    assert_eq!((d.tree.depth, d.train.epochs, d.train.seed), (3, 50, 0));
    assert!(!d.no_tree && !d.no_attention && d.fine_tune_from.is_none());
    let e = RunConfig::resolve(FileConfig::default(), &Overrides::default(), Some("env-root".into())).unwrap();
    assert_eq!(e.data_root, PathBuf::from("env-root"));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = |json: &str| serde_json::from_str::<FileConfig>(json).is_err();
    assert!(bad(r#"{"unknown": 1}"#));
    assert!(bad(r#"{"tree": {"depht": 3}}"#));
    assert!(bad(r#"{"train": {"epochs": -1}}"#));

    let zero_depth = Overrides {
        depth: Some(0),
        ..Overrides::default()
    };
    let err = RunConfig::resolve(FileConfig::default(), &zero_depth, None).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_CONFIG);
    let mut even = FileConfig::default();
    even.encoder.attention_kernel = 4;
    assert!(RunConfig::resolve(even, &Overrides::default(), None).is_err());
}

#[test]
fn exit_codes_by_error_kind() {
    assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
    assert_eq!(exit_code(&Error::Data("x".into())), EXIT_DATA);
    assert_eq!(exit_code(&Error::Checkpoint("x".into())), EXIT_DATA);
    assert_eq!(exit_code(&Error::NumericAbort("x".into())), EXIT_NUMERIC);
}

#[test]
fn command_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = data_root();
    let (code, _) = run(&["train", "--data-root", path_str(&root), "--dataset", "Missing", "--out", path_str(dir.path())]);
    assert_eq!(code, EXIT_DATA);

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"tree": {"depth": 3, "extra": true}}"#).unwrap();
    assert_eq!(run(&["train", "--config", path_str(&cfg)]).0, EXIT_CONFIG);
    assert_eq!(run(&["train", "--config", path_str(&dir.path().join("none.json"))]).0, EXIT_CONFIG);
    assert_eq!(run(&["train", "--depth", "three"]).0, EXIT_CONFIG);
    assert_eq!(run(&["frobnicate"]).0, EXIT_CONFIG);
    assert_eq!(run(&["evaluate", "--checkpoint", path_str(&dir.path().join("x.ckpt"))]).0, EXIT_DATA);
}

#[test]
fn train_evaluate_explain_round() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let root = data_root();
    let cfg = out.join("run.json");
    std::fs::write(&cfg, r#"{"tree": {"depth": 2}, "train": {"epochs": 9}}"#).unwrap();
    let (code, text) = run(&[
        "train", "--config", path_str(&cfg), "--data-root", path_str(&root), "--epochs", "2", "--depth", "3",
        "--out", path_str(out),
    ]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("test_accuracy"));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,lr,train_loss,train_acc,val_acc");
    assert_eq!(lines.len(), 3);
    let (model, info) = checkpoint::load(&out.join("model.ckpt")).unwrap();
    assert_eq!(model.config.tree.depth, 3);
    let info = info.unwrap();
    assert_eq!(info.dataset, "BasicMotions");
    assert_eq!(info.mean.len(), 6);

    let (code, text) = run(&["evaluate", "--out", path_str(out), "--data-root", path_str(&root)]);
    assert_eq!(code, 0);
    let acc: f64 = text.lines().last().unwrap().strip_prefix("test_accuracy ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let (code, _) = run(&["explain", "--out", path_str(out), "--data-root", path_str(&root), "--samples", "0,7"]);
    assert_eq!(code, 0);
    for s in [0, 7] {
        let json = std::fs::read_to_string(out.join(format!("explain/{s}.json"))).unwrap();
        let path = from_json(&json).unwrap();
        assert_eq!(path.sample_id, s);
        assert_eq!(path.nodes.len(), 3);
        let svg = std::fs::read_to_string(out.join(format!("explain/{s}.svg"))).unwrap();
        assert!(svg.starts_with("<?xml"));
    }
    let (code, _) = run(&["explain", "--out", path_str(out), "--data-root", path_str(&root), "--samples", "40"]);
    assert_eq!(code, EXIT_CONFIG);

    let tuned = out.join("tuned");
    let (code, text) = run(&[
        "train", "--data-root", path_str(&root), "--epochs", "1", "--out", path_str(&tuned), "--fine-tune-from",
        path_str(&out.join("model.ckpt")),
    ]);
    assert_eq!(code, 0, "{text}");
    let (tuned_model, _) = checkpoint::load(&tuned.join("model.ckpt")).unwrap();
    assert_eq!(tuned_model.config.tree.depth, 3);

    let wrong = out.join("wrong");
    let (code, _) = run(&[
        "train", "--data-root", path_str(&root), "--epochs", "1", "--out", path_str(&wrong), "--fine-tune-from",
        path_str(&out.join("missing.ckpt")),
    ]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn no_tree_checkpoint_cannot_be_explained() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(dir.path());
    let root = data_root();
    assert_eq!(run(&["train", "--data-root", path_str(&root), "--epochs", "1", "--no-tree", "--out", out]).0, 0);
    assert_eq!(run(&["evaluate", "--out", out, "--data-root", path_str(&root)]).0, 0);
    assert_eq!(run(&["explain", "--out", out, "--data-root", path_str(&root)]).0, EXIT_NUMERIC);
}

#[test]
fn gradcheck_command_passes_on_tiny_model() {
    let (code, text) = run(&["gradcheck", "--depth", "1", "--length", "32"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("within tolerance"));
    assert_eq!(run(&["gradcheck", "--tolerance", "1e-30"]).0, EXIT_NUMERIC);
}

#[test]
fn sweep_and_ablation_csv_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(dir.path());
    let root = data_root();
    assert_eq!(run(&["sweep-depth", "--data-root", path_str(&root), "--epochs", "1", "--out", out]).0, 0);
    let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<Vec<String>> = sweep.lines().map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows[0], ["depth", "leaves", "train_acc", "test_acc"]);
    assert_eq!(rows.len(), 5);
    for (row, d) in rows[1..].iter().zip(3..) {
        assert_eq!(row[0], d.to_string());
        assert_eq!(row[1], (1 << d).to_string());
    }

    assert_eq!(run(&["ablate", "--data-root", path_str(&root), "--epochs", "1", "--out", out]).0, 0);
    let ablation = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let variants: Vec<&str> = ablation.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["variant", "full", "no_tree", "no_attention"]);
}
