//! Video instance segmentation AP over spatio-temporal mask IoU.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::InstanceResult;
use crate::error::{Error, Result};
use crate::loss::GroundTruthInstance;
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Threshold-averaged AP of every class present in the ground truth.
    pub per_class: BTreeMap<usize, f64>,
    pub num_gt: usize,
}

/// `0.50, 0.55, …, 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// `|a ∧ b| / |a ∨ b|` over all frames; frames where an instance is absent
/// count as empty slices. Zero when both masks are empty.
pub fn st_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "st_iou", left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let union = a.union(b);
    Ok(if union == 0 { 0.0 } else { a.intersection(b) as f64 / union as f64 })
}

/// Greedy matching in score order: each prediction takes the unmatched
/// same-class gt of its clip with the highest IoU, if that IoU reaches
/// `threshold`. Returns the true-positive flag of each prediction in score
/// order. Ties in score keep clip/prediction order; ties in IoU take the
/// lower gt index.
fn match_class(
    ranked: &[(f64, usize, usize)],
    ious: &[Vec<Vec<f64>>],
    gts: &[Vec<GroundTruthInstance>],
    class: usize,
    threshold: f64,
) -> Vec<bool> {
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|&(_, clip, p)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts[clip].iter().enumerate() {
                if gt.class_id != class || taken[clip][g] {
                    continue;
                }
                let iou = ious[clip][p][g];
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[clip][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the 101-point interpolated precision/recall curve.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // precision envelope from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while k < recall.len() && recall[k] < level {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

/// Per-class AP averaged over `thresholds`, then over classes with ground
/// truth. `preds[i]` and `gts[i]` belong to clip `i`.
pub fn compute_ap(
    preds: &[Vec<InstanceResult>],
    gts: &[Vec<GroundTruthInstance>],
    thresholds: &[f64],
) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(alloc::format!("{} prediction lists for {} clips", preds.len(), gts.len())));
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("at least one IoU threshold is required".into()));
    }
    let ious: Vec<Vec<Vec<f64>>> = preds
        .iter()
        .zip(gts)
        .map(|(ps, gs)| ps.iter().map(|p| gs.iter().map(|g| st_iou(&p.mask, &g.mask)).collect()).collect())
        .collect::<Result<_>>()?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for g in gts.iter().flatten() {
        *counts.entry(g.class_id).or_default() += 1;
    }
    let mut per_class = BTreeMap::new();
    let (mut ap50_sum, mut ap75_sum) = (0.0, 0.0);
    for (&class, &n) in &counts {
        let mut ranked: Vec<(f64, usize, usize)> = preds
            .iter()
            .enumerate()
            .flat_map(|(c, ps)| {
                ps.iter().enumerate().filter(|(_, p)| p.class_id == class).map(move |(i, p)| (p.score, c, i))
            })
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let at = |thr: f64| interpolated_ap(&match_class(&ranked, &ious, gts, class, thr), n);
        let mean = thresholds.iter().map(|&t| at(t)).sum::<f64>() / thresholds.len() as f64;
        per_class.insert(class, mean);
        ap50_sum += at(0.5);
        ap75_sum += at(0.75);
    }
    let classes = counts.len().max(1) as f64;
    Ok(EvalResult {
        ap: per_class.values().sum::<f64>() / classes,
        ap50: ap50_sum / classes,
        ap75: ap75_sum / classes,
        per_class,
        num_gt: counts.values().sum(),
    })
}
