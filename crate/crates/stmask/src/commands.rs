//! The work behind each CLI subcommand, callable as a library.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use stmask_core::datagen::{GenConfig, Split};
use stmask_core::decoder::{InstanceResult, Model, ModelConfig};
use stmask_core::eval::{compute_ap, default_thresholds};
use stmask_core::loss::GroundTruthInstance;
use stmask_core::trainer::{infer, train, TrainConfig};

use crate::checkpoint::{load_checkpoint, read_json, save_checkpoint, write_json};
use crate::dataset::{load_split, make_dataset, Manifest};
use crate::overlay::render_overlays;
use crate::predictions::{prediction_path, read_predictions, write_predictions, EvalReport};
use crate::tensor_io::read_tensor;

pub const LOSS_CURVE_FILE: &str = "loss_curve.json";
pub const RUN_CONFIG_FILE: &str = "run.json";

/// Model and optimization settings of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelConfig::default(), train: TrainConfig::desk() }
    }
}

impl RunConfig {
    /// Reads a JSON config; fields it leaves out keep their values from
    /// [`RunConfig::default`].
    pub fn load(path: &Path) -> Result<Self> {
        let given: Value = read_json(path)?;
        let mut merged = serde_json::to_value(Self::default())?;
        merge(&mut merged, given);
        serde_json::from_value(merged).with_context(|| format!("invalid config {}", path.display()))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn gen_data(out: &Path, gen: &GenConfig, n_clips: usize, seed: u64) -> Result<Manifest> {
    gen.validate()?;
    let manifest = make_dataset(out, gen, n_clips, seed)?;
    log::info!("wrote {} clips to {}", manifest.clips.len(), out.display());
    Ok(manifest)
}

/// Trains on the train split of `data` and writes the checkpoint, the run
/// config and the loss curve into `out`. The model is initialized from
/// `cfg.train.seed`.
pub fn train_run(data: &Path, out: &Path, cfg: &RunConfig) -> Result<Vec<f64>> {
    let clips = load_split(data, Split::Train, None)?;
    ensure!(!clips.is_empty(), "{} has no training clips", data.display());
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    log::info!(
        "training on {} clips for {} iterations ({} parameters)",
        clips.len(),
        cfg.train.total_iters,
        model.params.num_scalars()
    );
    let curve = train(&mut model, &clips, &cfg.train, |l| {
        if l.iteration % 25 == 0 || l.iteration + 1 == cfg.train.total_iters {
            log::info!("iter {:4}  loss {:.4}  lr {:.2e}  grad {:.3}", l.iteration, l.loss, l.lr, l.grad_norm);
        }
    })?;
    save_checkpoint(out, &model)?;
    write_json(&out.join(RUN_CONFIG_FILE), cfg)?;
    write_json(&out.join(LOSS_CURVE_FILE), &curve)?;
    Ok(curve)
}

/// Predictions for every clip of `split`, written into `out`.
pub fn infer_split(checkpoint: &Path, data: &Path, split: Split, limit: Option<usize>, out: &Path) -> Result<usize> {
    let model = load_checkpoint(checkpoint)?;
    let clips = load_split(data, split, limit)?;
    for c in &clips {
        let results = infer(&model, &c.frames).with_context(|| format!("inference on {}", c.id))?;
        write_predictions(out, &c.id, &results)?;
    }
    log::info!("wrote predictions for {} clips to {}", clips.len(), out.display());
    Ok(clips.len())
}

/// Predictions for a single clip tensor file, named after the file stem.
pub fn infer_file(checkpoint: &Path, clip: &Path, out: &Path) -> Result<PathBuf> {
    let model = load_checkpoint(checkpoint)?;
    let frames = read_tensor(clip)?;
    let results = infer(&model, &frames).with_context(|| format!("inference on {}", clip.display()))?;
    let stem = clip.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
    write_predictions(out, stem, &results)
}

/// Scores the prediction files in `predictions` against the ground truth of
/// every clip of `split` that has one, writes `eval.json`/`eval.txt` into
/// `out` and returns the report.
pub fn eval_run(data: &Path, split: Split, limit: Option<usize>, predictions: &Path, out: &Path) -> Result<EvalReport> {
    let clips = load_split(data, split, limit)?;
    let mut preds: Vec<Vec<InstanceResult>> = Vec::new();
    let mut gts: Vec<Vec<GroundTruthInstance>> = Vec::new();
    for c in clips {
        let path = prediction_path(predictions, &c.id);
        preds.push(read_predictions(&path)?);
        gts.push(c.instances);
    }
    ensure!(!gts.is_empty(), "no clips to evaluate in {}", data.display());
    let result = compute_ap(&preds, &gts, &default_thresholds())?;
    let report = EvalReport::new(&result, gts.len());
    report.write(out)?;
    Ok(report)
}

pub fn overlay(clip: &Path, predictions: &Path, min_score: f64, scale: u32, out: &Path) -> Result<Vec<PathBuf>> {
    let frames = read_tensor(clip)?;
    let preds = read_predictions(predictions)?;
    let stem = clip.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
    render_overlays(&frames, &preds, min_score, scale, out, stem)
}
