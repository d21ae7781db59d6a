//! Set-prediction loss with Hungarian matching and deep supervision.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{bce_with_logits, dice_loss, Tape, Var};
use crate::decoder::StateVars;
use crate::error::{invalid, Error, Result};
use crate::mask::BinaryMask;
use crate::matching::{hungarian_match, Assignment};
use crate::real::Real;
use crate::tensor::{dims2, softmax_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub w_cls: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    /// Cross-entropy weight of the "no object" class.
    pub no_object_weight: f64,
    /// Supervise every decoder state; otherwise only the last.
    pub deep_supervision: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { w_cls: 2.0, w_bce: 5.0, w_dice: 5.0, no_object_weight: 0.1, deep_supervision: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub class_id: usize,
    /// `[T,H,W]` at frame resolution.
    pub mask: BinaryMask,
}

/// A ground-truth instance resampled to the mask resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTarget<F = f32> {
    pub class_id: usize,
    /// Occupied fraction of each mask cell, `[T·H_m·W_m]`.
    pub mask: Vec<F>,
}

/// Area-downsamples every gt mask to `mask_hw`.
pub fn prepare_targets<F: Real>(gts: &[GroundTruthInstance], mask_hw: (usize, usize)) -> Result<Vec<SoftTarget<F>>> {
    gts.iter()
        .map(|g| {
            if g.mask.count() == 0 {
                return Err(invalid("ground-truth mask is empty"));
            }
            Ok(SoftTarget { class_id: g.class_id, mask: g.mask.area_downsample(mask_hw.0, mask_hw.1)? })
        })
        .collect()
}

/// Row-major `[N,G]` matching cost:
/// `w_cls·(−p_n[c_g]) + w_bce·BCE(m_n, m_g) + w_dice·Dice(m_n, m_g)` over the
/// whole volume. `mask_logits: [N,S]`, `class_logits: [N,K+1]`.
pub fn match_cost<F: Real>(
    class_logits: &Tensor<F>,
    mask_logits: &Tensor<F>,
    targets: &[SoftTarget<F>],
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    let (n, k1) = dims2("match_cost", class_logits)?;
    let (nm, s) = dims2("match_cost", mask_logits)?;
    if nm != n {
        return Err(Error::ShapeMismatch {
            op: "match_cost",
            left: class_logits.shape().to_vec(),
            right: mask_logits.shape().to_vec(),
        });
    }
    for t in targets {
        if t.mask.len() != s || t.class_id + 1 >= k1 {
            return Err(invalid("match_cost: target does not fit the predictions"));
        }
    }
    let mut probs = class_logits.data().to_vec();
    probs.chunks_mut(k1).for_each(softmax_in_place);
    let g = targets.len();
    let mut cost = vec![0.0; n * g];
    for q in 0..n {
        let logits = &mask_logits.data()[q * s..(q + 1) * s];
        for (j, t) in targets.iter().enumerate() {
            let bce = logits.iter().zip(&t.mask).map(|(&x, &y)| bce_with_logits(x, y).as_f64()).sum::<f64>() / s as f64;
            let dice = dice_loss(logits, &t.mask).as_f64();
            cost[q * g + j] = -cfg.w_cls * probs[q * k1 + t.class_id].as_f64() + cfg.w_bce * bce + cfg.w_dice * dice;
        }
    }
    Ok(cost)
}

/// Loss of one decoder state and the assignment it used.
pub fn state_loss<F: Real>(
    tape: &mut Tape<F>,
    state: &StateVars,
    targets: &[SoftTarget<F>],
    cfg: &LossConfig,
    fixed: Option<&Assignment>,
) -> Result<(Var, Assignment)> {
    let (n, k1) = dims2("set_loss", tape.value(state.class_logits))?;
    let g = targets.len();
    let assignment = match fixed {
        Some(a) => a.clone(),
        None => {
            let cost = match_cost(tape.value(state.class_logits), tape.value(state.mask_logits), targets, cfg)?;
            hungarian_match(&cost, n, g)?
        }
    };
    if assignment.pairs.len() != g {
        return Err(invalid("set_loss: assignment does not cover every target"));
    }
    let no_object = k1 - 1;
    let mut classes = vec![no_object; n];
    for &(q, j) in &assignment.pairs {
        classes[q] = targets[j].class_id;
    }
    let mut weights = vec![F::one(); k1];
    weights[no_object] = F::from_f64(cfg.no_object_weight);
    let ce = tape.cross_entropy(state.class_logits, &classes, &weights)?;
    let mut loss = tape.scale(ce, F::from_f64(cfg.w_cls));
    if g > 0 {
        let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let flat: Vec<F> = assignment.pairs.iter().flat_map(|p| targets[p.1].mask.iter().copied()).collect();
        let matched = tape.gather_rows(state.mask_logits, &rows)?;
        let inv_g = F::from_f64(1.0 / g as f64);
        let bce = tape.bce_rows(matched, &flat)?;
        let bce = tape.sum(bce);
        let bce = tape.scale(bce, F::from_f64(cfg.w_bce) * inv_g);
        let dice = tape.dice_rows(matched, &flat)?;
        let dice = tape.sum(dice);
        let dice = tape.scale(dice, F::from_f64(cfg.w_dice) * inv_g);
        loss = tape.add(loss, bce)?;
        loss = tape.add(loss, dice)?;
    }
    Ok((loss, assignment))
}

/// Sum of per-state losses over the supervised states. `fixed` pins one
/// assignment per state, which keeps the loss smooth for gradient checks.
pub fn set_loss<F: Real>(
    tape: &mut Tape<F>,
    states: &[StateVars],
    targets: &[SoftTarget<F>],
    cfg: &LossConfig,
    fixed: Option<&[Assignment]>,
) -> Result<(Var, Vec<Assignment>)> {
    let Some(last) = states.len().checked_sub(1) else {
        return Err(invalid("set_loss needs at least one decoder state"));
    };
    let first = if cfg.deep_supervision { 0 } else { last };
    let mut total: Option<Var> = None;
    let mut assignments = Vec::new();
    for (i, s) in states.iter().enumerate().skip(first) {
        let pinned = match fixed {
            Some(f) => Some(f.get(i - first).ok_or_else(|| invalid("set_loss: missing fixed assignment"))?),
            None => None,
        };
        let (l, a) = state_loss(tape, s, targets, cfg, pinned)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
        assignments.push(a);
    }
    Ok((total.expect("at least one supervised state"), assignments))
}
