//! Training and whole-clip inference.

use alloc::format;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMask3D;
use crate::autograd::{Tape, Var};
use crate::datagen::{window, SyntheticClip};
use crate::decoder::{ForwardOptions, InstanceResult, Model, Trace};
use crate::error::{Error, Result};
use crate::eval::{compute_ap, default_thresholds, EvalResult};
use crate::loss::{prepare_targets, set_loss, GroundTruthInstance, LossConfig, SoftTarget};
use crate::matching::Assignment;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamGroup;
use crate::real::Real;
use crate::tensor::Tensor;

/// Predictions kept per clip at inference.
pub const TOP_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub backbone_lr_multiplier: f64,
    pub total_iters: usize,
    /// The learning rate drops once `iter ≥ decay_fraction · total_iters`.
    pub decay_fraction: f64,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Frames per training window.
    pub clip_length: usize,
    pub seed: u64,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            weight_decay: 0.05,
            backbone_lr_multiplier: 0.1,
            total_iters: 500,
            decay_fraction: 2.0 / 3.0,
            decay_factor: 10.0,
            batch_size: 4,
            clip_length: 2,
            seed: 0,
            grad_clip: None,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for the 500-iteration synthetic run: same schedule shape,
    /// larger learning rate and batch, no backbone multiplier.
    pub fn desk() -> Self {
        Self { base_lr: 2e-3, backbone_lr_multiplier: 1.0, batch_size: 40, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay_fraction > 0.0 && self.decay_fraction < 1.0) {
            return Err(Error::Config(format!("decay_fraction {} must lie in (0,1)", self.decay_fraction)));
        }
        if !(self.decay_factor > 1.0) {
            return Err(Error::Config(format!("decay_factor {} must exceed 1", self.decay_factor)));
        }
        if self.batch_size == 0 || self.clip_length == 0 {
            return Err(Error::Config("batch_size and clip_length must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 || !(self.backbone_lr_multiplier >= 0.0) {
            return Err(Error::Config("learning rates must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// Step schedule: `base_lr · (multiplier if backbone) / (decay_factor once
/// iter ≥ decay_fraction · total_iters)`.
pub fn lr_at(iter: usize, cfg: &TrainConfig, is_backbone: bool) -> f64 {
    let mut lr = cfg.base_lr;
    if is_backbone {
        lr *= cfg.backbone_lr_multiplier;
    }
    if iter as f64 >= cfg.decay_fraction * cfg.total_iters as f64 {
        lr /= cfg.decay_factor;
    }
    lr
}

/// A clip with its ground truth, as loaded from a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub id: alloc::string::String,
    /// `[T,H,W,3]`
    pub frames: Tensor<f32>,
    pub instances: Vec<GroundTruthInstance>,
}

impl From<SyntheticClip> for LabeledClip {
    fn from(c: SyntheticClip) -> Self {
        Self { id: format!("clip{:05}", c.seed), frames: c.frames, instances: c.instances }
    }
}

/// Discrete choices of one loss evaluation; replaying them makes the loss
/// a smooth function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen<F = f32> {
    pub masks: Vec<AttentionMask3D<F>>,
    pub assignments: Vec<Assignment>,
}

/// Set loss of one clip. With `frozen`, attention masks and assignments are
/// replayed instead of recomputed.
pub fn clip_loss<F: Real>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    vars: &[Var],
    clip: &Tensor<F>,
    targets: &[SoftTarget<F>],
    loss: &LossConfig,
    frozen: Option<&Frozen<F>>,
) -> Result<(Var, Frozen<F>)> {
    let opts = ForwardOptions { frozen_masks: frozen.map(|f| f.masks.clone()) };
    let trace: Trace<F> = model.forward_tape(tape, vars, clip, &opts)?;
    let (l, assignments) = set_loss(tape, &trace.states, targets, loss, frozen.map(|f| f.assignments.as_slice()))?;
    Ok((l, Frozen { masks: trace.masks, assignments }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterLog {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Trains `model` in place on random windows of `clips`. Every draw comes
/// from one generator seeded with `cfg.seed`. Returns the mean batch loss of
/// each iteration.
pub fn train(
    model: &mut Model<f32>,
    clips: &[LabeledClip],
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(&IterLog),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Some(c) = clips.iter().find(|c| c.frames.shape()[0] < cfg.clip_length) {
        return Err(Error::InvalidArgument(format!(
            "clip {} has {} frames, fewer than the window of {}",
            c.id,
            c.frames.shape()[0],
            cfg.clip_length
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, &model.params);
    let mask_hw = model.config.mask_resolution;
    let inv_batch = 1.0 / cfg.batch_size as f32;
    let mut curve = Vec::with_capacity(cfg.total_iters);
    for iteration in 0..cfg.total_iters {
        model.params.zero_grad();
        let mut total = 0.0f64;
        for _ in 0..cfg.batch_size {
            let clip = &clips[rng.gen_range(0..clips.len())];
            let start = rng.gen_range(0..=clip.frames.shape()[0] - cfg.clip_length);
            let (frames, gts) = window(&clip.frames, &clip.instances, start, cfg.clip_length)?;
            let targets = prepare_targets::<f32>(&gts, mask_hw)?;
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape);
            let (l, _) = clip_loss(model, &mut tape, &vars, &frames, &targets, &cfg.loss, None)?;
            let value = tape.value(l).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { iteration, loss: value });
            }
            total += value;
            let scaled = tape.scale(l, inv_batch);
            tape.backward(scaled)?;
            model.params.collect_grads(&tape, &vars);
        }
        let grad_norm = global_grad_norm(model);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { iteration, loss: grad_norm });
        }
        if let Some(max) = cfg.grad_clip {
            if grad_norm > max {
                let s = (max / grad_norm) as f32;
                for p in model.params.iter_mut() {
                    if let Some(g) = p.tensor.grad.as_mut() {
                        g.iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
        }
        opt.step(&mut model.params, |g| lr_at(iteration, cfg, g == ParamGroup::Backbone));
        let loss = total / cfg.batch_size as f64;
        on_iter(&IterLog { iteration, loss, lr: lr_at(iteration, cfg, false), grad_norm });
        curve.push(loss);
    }
    Ok(curve)
}

fn global_grad_norm(model: &Model<f32>) -> f64 {
    model
        .params
        .iter()
        .filter_map(|p| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// One forward pass over the whole clip, whatever its length, and the top
/// [`TOP_K`] predictions. No post-processing links frames.
pub fn infer<F: Real>(model: &Model<F>, clip: &Tensor<F>) -> Result<Vec<InstanceResult>> {
    model.infer(clip, TOP_K)
}

/// Runs [`infer`] on every clip and scores the predictions.
pub fn evaluate(model: &Model<f32>, clips: &[LabeledClip]) -> Result<(EvalResult, Vec<Vec<InstanceResult>>)> {
    let preds: Vec<Vec<InstanceResult>> = clips.iter().map(|c| infer(model, &c.frames)).collect::<Result<_>>()?;
    let gts: Vec<Vec<GroundTruthInstance>> = clips.iter().map(|c| c.instances.clone()).collect();
    Ok((compute_ap(&preds, &gts, &default_thresholds())?, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_clip, GenConfig};
    use crate::decoder::ModelConfig;
    use crate::gradcheck::{check_gradients, GradCheck};

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig { total_iters: 6000, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg, false), 1e-4);
        assert_eq!(lr_at(0, &cfg, true), 1e-5);
        assert_eq!(lr_at(3999, &cfg, false), 1e-4);
        assert_eq!(lr_at(4000, &cfg, false), 1e-5);
        assert_eq!(lr_at(5999, &cfg, false), 1e-5);
    }

    #[test]
    fn schedule_is_non_increasing_with_one_drop() {
        let cfg = TrainConfig::default();
        for backbone in [false, true] {
            let lrs: Vec<f64> = (0..cfg.total_iters).map(|i| lr_at(i, &cfg, backbone)).collect();
            assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(lrs.windows(2).filter(|w| w[1] != w[0]).count(), 1);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { decay_fraction: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { decay_factor: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn tiny_clips(n: usize) -> Vec<LabeledClip> {
        let gen = GenConfig {
            frame_size: (8, 8),
            frames: 2,
            max_instances: 2,
            radius: (1.5, 2.5),
            half_extent: (1.0, 2.5),
            max_speed: 0.5,
            min_visible: 0.2,
            ..GenConfig::default()
        };
        (0..n as u64).map(|s| generate_clip(&gen, s).unwrap().into()).collect()
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let model = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        let clip = &tiny_clips(1)[0];
        let frames: Tensor<f64> = clip.frames.cast();
        let targets = prepare_targets::<f64>(&clip.instances, model.config.mask_resolution).unwrap();
        let loss = LossConfig::default();
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let (_, frozen) = clip_loss(&model, &mut tape, &vars, &frames, &targets, &loss, None).unwrap();
        let params: Vec<Tensor<f64>> = model.params.iter().map(|p| p.tensor.clone()).collect();
        let tol = GradCheck { step: 1e-6, rel: 1e-3, abs: 1e-5 };
        let report = check_gradients(&params, tol, |tape, vars| {
            clip_loss(&model, tape, vars, &frames, &targets, &loss, Some(&frozen)).map(|r| r.0)
        })
        .unwrap();
        assert_eq!(report.checked, model.params.num_scalars());
    }

    #[test]
    fn loss_halves_on_a_frozen_batch() {
        let mut model = Model::<f32>::new(ModelConfig::tiny(), 2).unwrap();
        let clips = tiny_clips(2);
        let cfg = TrainConfig {
            base_lr: 3e-3,
            backbone_lr_multiplier: 1.0,
            total_iters: 50,
            batch_size: 2,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let curve = train(&mut model, &clips, &cfg, |_| {}).unwrap();
        let first = curve[0];
        let last = curve[45..].iter().sum::<f64>() / 5.0;
        assert!(last <= 0.5 * first, "loss {first} -> {last}");
    }

    #[test]
    fn same_seed_same_run() {
        let clips = tiny_clips(3);
        let cfg = TrainConfig { total_iters: 3, batch_size: 2, ..TrainConfig::default() };
        let run = || {
            let mut m = Model::<f32>::new(ModelConfig::tiny(), 5).unwrap();
            let c = train(&mut m, &clips, &cfg, |_| {}).unwrap();
            (m, c)
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_input_is_reported() {
        let mut clips = tiny_clips(1);
        clips[0].frames.data_mut()[0] = f32::NAN;
        let mut m = Model::<f32>::new(ModelConfig::tiny(), 5).unwrap();
        let cfg = TrainConfig { total_iters: 1, batch_size: 1, ..TrainConfig::default() };
        assert!(train(&mut m, &clips, &cfg, |_| {}).is_err());
    }

    #[test]
    fn inference_accepts_any_length() {
        let m = Model::<f32>::new(ModelConfig::tiny(), 5).unwrap();
        for t in [1, 4, 8] {
            let clip = Tensor::full(&[t, 8, 8, 3], 0.3f32);
            let out = infer(&m, &clip).unwrap();
            assert!(out.len() <= TOP_K);
            assert!(out
                .iter()
                .all(|r| r.mask.shape() == [t, 8, 8] && r.class_id < 2 && (0.0..=1.0).contains(&r.score)));
        }
    }
}
