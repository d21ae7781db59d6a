use std::path::Path;
use std::process::{Command, Output};

use stmask::checkpoint::load_checkpoint;
use stmask::commands::{RunConfig, LOSS_CURVE_FILE, RUN_CONFIG_FILE};
use stmask::dataset::read_manifest;
use stmask::predictions::{read_predictions, EvalReport};
use stmask_core::datagen::Split;

fn stmask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stmask")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = stmask(args);
    assert!(out.status.success(), "stmask {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn every_subcommand_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt, preds) = (dir.path().join("data"), dir.path().join("ckpt"), dir.path().join("preds"));

    ok(&["--seed", "3", "gen-data", "--out", p(&data), "--clips", "6", "--frames", "3"]);
    let manifest = read_manifest(&data).unwrap();
    assert_eq!(manifest.clips.len(), 6);
    assert_eq!(manifest.base_seed, 3);
    assert!(manifest.clips.iter().all(|c| c.split == if c.seed % 2 == 0 { Split::Train } else { Split::Val }));

    let stdout = ok(&["train", "--data", p(&data), "--out", p(&ckpt), "--iters", "2", "--batch-size", "1"]);
    assert!(stdout.contains("checkpoint in"));
    let model = load_checkpoint(&ckpt).unwrap();
    let run: RunConfig = serde_json::from_str(&std::fs::read_to_string(ckpt.join(RUN_CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(run.train.total_iters, 2);
    assert_eq!(run.model, model.config);
    let curve: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(ckpt.join(LOSS_CURVE_FILE)).unwrap()).unwrap();
    assert_eq!(curve.len(), 2);

    ok(&["infer", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "val", "--out", p(&preds)]);
    let first_val = manifest.clips.iter().find(|c| c.split == Split::Val).unwrap();
    let results = read_predictions(&preds.join(format!("{}.json", first_val.id))).unwrap();
    assert!(!results.is_empty() && results.len() <= 10);
    assert!(results.iter().all(|r| r.mask.shape() == [3, 64, 64]));

    let text = ok(&["eval", "--data", p(&data), "--predictions", p(&preds)]);
    assert!(text.contains("AP50"));
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(preds.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report.num_clips, 3);
    assert!((0.0..=1.0).contains(&report.ap));

    let clip = data.join(&first_val.frames);
    let single = dir.path().join("single");
    ok(&["infer", "--checkpoint", p(&ckpt), "--clip", p(&clip), "--out", p(&single)]);
    let pred_file = single.join(format!("{}.json", first_val.id));
    assert_eq!(read_predictions(&pred_file).unwrap(), results);

    let pngs = dir.path().join("png");
    ok(&[
        "overlay",
        "--clip",
        p(&clip),
        "--predictions",
        p(&pred_file),
        "--out",
        p(&pngs),
        "--min-score",
        "0",
        "--scale",
        "2",
    ]);
    let img = image::open(pngs.join(format!("{}_t02.png", first_val.id))).unwrap();
    assert_eq!((img.width(), img.height()), (256, 128));
}

#[test]
fn config_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = (dir.path().join("data"), dir.path().join("ckpt"));
    ok(&["gen-data", "--out", p(&data), "--clips", "2", "--frames", "2"]);
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"model": {"num_queries": 4}, "train": {"total_iters": 1, "batch_size": 1}}"#).unwrap();
    ok(&["train", "--data", p(&data), "--out", p(&ckpt), "--config", p(&cfg)]);
    let model = load_checkpoint(&ckpt).unwrap();
    assert_eq!(model.config.num_queries, 4);
    assert_eq!(model.config.width, RunConfig::default().model.width);
    let run: RunConfig = serde_json::from_str(&std::fs::read_to_string(ckpt.join(RUN_CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(run.train.total_iters, 1);
    assert_eq!(run.train.base_lr, RunConfig::default().train.base_lr);
}

#[test]
fn errors_name_the_missing_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = stmask(&["train", "--data", p(&missing), "--out", p(&dir.path().join("ckpt")), "--iters", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));

    let out = stmask(&["infer", "--checkpoint", p(&missing), "--clip", p(&missing), "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn infer_needs_a_source() {
    let out = stmask(&["infer", "--checkpoint", "x", "--out", "y"]);
    assert!(!out.status.success());
}
