//! Prediction files and evaluation reports.
//!
//! Each clip gets `<dir>/<clip_id>.json` listing `{class_id, score, mask}`,
//! with masks stored next to it as tensor files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use stmask_core::decoder::InstanceResult;
use stmask_core::eval::EvalResult;

use crate::checkpoint::{read_json, write_json};
use crate::dataset::read_mask;
use crate::tensor_io::write_tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub clip_id: String,
    pub predictions: Vec<PredictionRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRef {
    pub class_id: usize,
    pub score: f64,
    pub query_index: usize,
    /// Relative to the prediction file.
    pub mask: PathBuf,
}

pub fn prediction_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join(format!("{clip_id}.json"))
}

pub fn write_predictions(dir: &Path, clip_id: &str, results: &[InstanceResult]) -> Result<PathBuf> {
    let predictions = results
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let mask = PathBuf::from(format!("{clip_id}_{k}.tensor"));
            write_tensor(&dir.join(&mask), &r.mask.to_tensor())?;
            Ok(PredictionRef { class_id: r.class_id, score: r.score, query_index: r.query_index, mask })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = prediction_path(dir, clip_id);
    write_json(&path, &PredictionFile { clip_id: clip_id.to_string(), predictions })?;
    Ok(path)
}

pub fn read_predictions(path: &Path) -> Result<Vec<InstanceResult>> {
    let file: PredictionFile = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    file.predictions
        .iter()
        .map(|p| {
            Ok(InstanceResult {
                class_id: p.class_id,
                score: p.score,
                mask: read_mask(&base.join(&p.mask)).with_context(|| format!("prediction of {}", file.clip_id))?,
                query_index: p.query_index,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_class: BTreeMap<usize, f64>,
    pub num_gt: usize,
    pub num_clips: usize,
}

impl EvalReport {
    pub fn new(r: &EvalResult, num_clips: usize) -> Self {
        Self { ap: r.ap, ap50: r.ap50, ap75: r.ap75, per_class: r.per_class.clone(), num_gt: r.num_gt, num_clips }
    }

    /// Human-readable summary, values ×100.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "clips {}  instances {}\nAP {:.1}  AP50 {:.1}  AP75 {:.1}\n",
            self.num_clips,
            self.num_gt,
            100.0 * self.ap,
            100.0 * self.ap50,
            100.0 * self.ap75
        );
        for (c, ap) in &self.per_class {
            let _ = writeln!(s, "class {c}: AP {:.1}", 100.0 * ap);
        }
        s
    }

    /// Writes `eval.json` and `eval.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("eval.json"), self)?;
        std::fs::write(dir.join("eval.txt"), self.to_text()).with_context(|| format!("writing {}", dir.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stmask_core::mask::BinaryMask;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = BinaryMask::empty(2, 3, 3);
        m.set(1, 2, 0, true);
        let results = vec![
            InstanceResult { class_id: 1, score: 0.75, mask: m.clone(), query_index: 4 },
            InstanceResult { class_id: 0, score: 0.125, mask: BinaryMask::empty(2, 3, 3), query_index: 0 },
        ];
        let path = write_predictions(dir.path(), "clip00003", &results).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), results);
    }

    #[test]
    fn report_text() {
        let r = EvalReport {
            ap: 0.5,
            ap50: 0.8,
            ap75: 0.25,
            per_class: BTreeMap::from([(0, 0.5)]),
            num_gt: 3,
            num_clips: 2,
        };
        assert!(r.to_text().contains("AP 50.0  AP50 80.0  AP75 25.0"));
    }
}
