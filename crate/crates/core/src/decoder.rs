//! The full model: pixel encoder, masked-attention decoder layers, and the
//! class and 3D-mask prediction heads.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    build_attention_mask, ffn, masked_cross_attention, resize_volume, self_attention, AttentionMask3D, AttnParams,
    FfnParams, SelfAttnParams, MASK_THRESHOLD,
};
use crate::autograd::{dims4, Tape, Var};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::params::{Bind, Linear, Norm, ParamGroup, ParamStore};
use crate::posenc::{combined_3d, spatial_only_3d};
use crate::real::Real;
use crate::tensor::{softmax_in_place, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Object queries `N`.
    pub num_queries: usize,
    /// Channel width `C`.
    pub width: usize,
    /// Decoder layers `L`.
    pub layers: usize,
    pub heads: usize,
    /// Real classes `K`; the class head has one extra "no object" output.
    pub num_classes: usize,
    /// Input frame `(H, W)`.
    pub frame_size: (usize, usize),
    /// Resolution of `E_pixel` and of the predicted masks.
    pub mask_resolution: (usize, usize),
    /// Attention feature resolutions, cycled across decoder layers.
    pub feature_resolutions: Vec<(usize, usize)>,
    /// Output widths of the 3×3 convolution stages of the pixel encoder.
    pub encoder_widths: Vec<usize>,
    pub ffn_hidden: usize,
    /// Add the temporal term of the positional encoding to keys.
    pub temporal_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 10,
            width: 64,
            layers: 3,
            heads: 4,
            num_classes: 2,
            frame_size: (64, 64),
            mask_resolution: (16, 16),
            feature_resolutions: vec![(16, 16)],
            encoder_widths: vec![16, 32, 64],
            ffn_hidden: 128,
            temporal_encoding: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            num_queries: 3,
            width: 8,
            layers: 2,
            heads: 2,
            num_classes: 2,
            frame_size: (8, 8),
            mask_resolution: (4, 4),
            feature_resolutions: vec![(4, 4), (2, 2)],
            encoder_widths: vec![4, 6],
            ffn_hidden: 12,
            temporal_encoding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.num_queries == 0 {
            return bad("num_queries must be at least 1".into());
        }
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if !self.width.is_multiple_of(4) {
            return bad(format!("width {} must be a multiple of 4 for the spatial encoding", self.width));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.encoder_widths.is_empty() {
            return bad("encoder needs at least one stage".into());
        }
        if self.feature_resolutions.is_empty() {
            return bad("at least one feature resolution is required".into());
        }
        let (fh, fw) = self.frame_size;
        let (mh, mw) = self.mask_resolution;
        if mh == 0 || mw == 0 || fh % mh != 0 || fw % mw != 0 || fh / mh != fw / mw {
            return bad(format!("mask resolution {mh}x{mw} must evenly divide frame {fh}x{fw} by one factor"));
        }
        let ratio = fh / mh;
        if !ratio.is_power_of_two() || ratio.trailing_zeros() as usize > self.encoder_widths.len() {
            return bad(format!("frame/mask ratio {ratio} needs a power of two reachable with the encoder stages"));
        }
        for &(h, w) in &self.feature_resolutions {
            if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 || mh / h != mw / w {
                return bad(format!("feature resolution {h}x{w} must evenly divide the mask resolution"));
            }
        }
        Ok(())
    }

    pub fn no_object_class(&self) -> usize {
        self.num_classes
    }

    fn pool_count(&self) -> usize {
        (self.frame_size.0 / self.mask_resolution.0).trailing_zeros() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<H = usize> {
    pub cross: AttnParams<H>,
    pub self_attn: SelfAttnParams<H>,
    pub ffn: FfnParams<H>,
}

/// Parameter ids of every component, resolved from names at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub encoder: Vec<Linear>,
    pub pixel_proj: Linear,
    pub feature_proj: Vec<Linear>,
    pub queries: usize,
    pub layers: Vec<LayerParams>,
    pub head_norm: Norm,
    pub class_head: Linear,
    pub mask_mlp: Vec<Linear>,
}

/// Layout with ids replaced by the tape variables of one forward pass.
#[derive(Debug, Clone)]
pub struct BoundLayout {
    pub encoder: Vec<Linear<Var>>,
    pub pixel_proj: Linear<Var>,
    pub feature_proj: Vec<Linear<Var>>,
    pub queries: Var,
    pub layers: Vec<LayerParams<Var>>,
    pub head_norm: Norm<Var>,
    pub class_head: Linear<Var>,
    pub mask_mlp: Vec<Linear<Var>>,
}

impl Bind for Layout {
    type Bound = BoundLayout;
    fn bind(&self, vars: &[Var]) -> BoundLayout {
        BoundLayout {
            encoder: self.encoder.iter().map(|l| l.bind(vars)).collect(),
            pixel_proj: self.pixel_proj.bind(vars),
            feature_proj: self.feature_proj.iter().map(|l| l.bind(vars)).collect(),
            queries: vars[self.queries],
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    cross: l.cross.bind(vars),
                    self_attn: l.self_attn.bind(vars),
                    ffn: l.ffn.bind(vars),
                })
                .collect(),
            head_norm: self.head_norm.bind(vars),
            class_head: self.class_head.bind(vars),
            mask_mlp: self.mask_mlp.iter().map(|l| l.bind(vars)).collect(),
        }
    }
}

/// Per-position features of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume<F = f32> {
    /// `E_pixel`: `[T,H_m,W_m,C]`.
    pub pixel: Tensor<F>,
    /// One `[T,H_l,W_l,C]` map per configured feature resolution.
    pub attention: Vec<Tensor<F>>,
}

/// Predictions after one decoder layer (layer 0 reads the raw queries).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<F = f32> {
    pub layer_index: usize,
    /// `X_l`: `[N,C]`.
    pub queries: Tensor<F>,
    /// Mask probabilities `[N,T,H_m,W_m]`.
    pub mask_prob: Tensor<F>,
    /// `[N,K+1]`.
    pub class_logits: Tensor<F>,
}

/// Tape handles for one state; the loss reads these.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub queries: Var,
    /// `[N, T·H_m·W_m]`
    pub mask_logits: Var,
    /// `[N,K+1]`
    pub class_logits: Var,
}

/// Everything recorded by one differentiable forward pass.
#[derive(Debug, Clone)]
pub struct Trace<F = f32> {
    pub frames: usize,
    pub states: Vec<StateVars>,
    /// Attention mask used by decoder layer `l` at index `l − 1`.
    pub masks: Vec<AttentionMask3D<F>>,
    pub pixel: Var,
    pub attention_features: Vec<Var>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<F = f32> {
    /// Replaces the masks derived from predictions; keeps the forward pass
    /// smooth in the parameters for finite-difference checks.
    pub frozen_masks: Option<Vec<AttentionMask3D<F>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub class_id: usize,
    pub score: f64,
    pub mask: BinaryMask,
    /// The query that produced the mask in every frame.
    pub query_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub layout: Layout,
}

impl<F: Real> Model<F> {
    /// Builds a freshly initialized model; identical `(config, seed)` give
    /// identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = config.width;
        let bb = ParamGroup::Backbone;
        let dec = ParamGroup::Decoder;

        let mut encoder = Vec::new();
        let mut cin = 3;
        for (i, &cout) in config.encoder_widths.iter().enumerate() {
            encoder.push(p.conv(&format!("encoder.conv{i}"), bb, 9 * cin, cout, &mut rng));
            cin = cout;
        }
        let pixel_proj = p.linear("encoder.pixel_proj", bb, cin, c, &mut rng);
        let feature_proj = (0..config.feature_resolutions.len())
            .map(|i| p.linear(&format!("encoder.feature_proj{i}"), bb, cin, c, &mut rng))
            .collect();

        let bound = 3f64.sqrt();
        let queries = p.insert(
            "decoder.queries",
            dec,
            Tensor::from_fn(&[config.num_queries, c], |_| F::from_f64(rng.gen_range(-bound..bound))),
        );
        let attn = |p: &mut ParamStore<F>, name: &str, rng: &mut ChaCha8Rng| AttnParams {
            q: p.linear(&format!("{name}.q"), dec, c, c, rng),
            k: p.linear(&format!("{name}.k"), dec, c, c, rng),
            v: p.linear(&format!("{name}.v"), dec, c, c, rng),
            out: p.linear(&format!("{name}.out"), dec, c, c, rng),
        };
        let layers = (0..config.layers)
            .map(|l| {
                let pre = format!("decoder.layer{l}");
                let cross = attn(&mut p, &format!("{pre}.cross"), &mut rng);
                let self_attn = SelfAttnParams {
                    norm: p.layer_norm(&format!("{pre}.self.norm"), dec, c),
                    attn: attn(&mut p, &format!("{pre}.self"), &mut rng),
                };
                let ffn = FfnParams {
                    norm: p.layer_norm(&format!("{pre}.ffn.norm"), dec, c),
                    fc1: p.linear(&format!("{pre}.ffn.fc1"), dec, c, config.ffn_hidden, &mut rng),
                    fc2: p.linear(&format!("{pre}.ffn.fc2"), dec, config.ffn_hidden, c, &mut rng),
                };
                LayerParams { cross, self_attn, ffn }
            })
            .collect();
        let head_norm = p.layer_norm("head.norm", dec, c);
        let class_head = p.linear("head.class", dec, c, config.num_classes + 1, &mut rng);
        let mask_mlp = (0..3).map(|i| p.linear(&format!("head.mask_mlp{i}"), dec, c, c, &mut rng)).collect();

        let layout = Layout { encoder, pixel_proj, feature_proj, queries, layers, head_norm, class_head, mask_mlp };
        Ok(Self { config, params: p, layout })
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    /// Differentiable forward pass over a `[T,H,W,3]` clip with values in `[0,1]`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        clip: &Tensor<F>,
        opts: &ForwardOptions<F>,
    ) -> Result<Trace<F>> {
        let cfg = &self.config;
        let b = self.layout.bind(vars);
        let (t, _, _, _) = self.check_clip(clip)?;
        let (pixel, feats) = self.encode(tape, &b, clip)?;
        let c = cfg.width;

        let pos: Vec<Var> = cfg
            .feature_resolutions
            .iter()
            .map(|&(h, w)| -> Result<Var> {
                let pe = if cfg.temporal_encoding {
                    combined_3d::<F>(t, h, w, c)?
                } else {
                    spatial_only_3d::<F>(t, h, w, c)?
                };
                Ok(tape.constant(pe.combined.reshape(&[t * h * w, c])?))
            })
            .collect::<Result<_>>()?;

        let mut x = b.queries;
        let mut states = vec![self.heads(tape, &b, x, pixel)?];
        let mut masks = Vec::with_capacity(cfg.layers);
        for (l, layer) in b.layers.iter().enumerate() {
            let r = l % cfg.feature_resolutions.len();
            let mask = match &opts.frozen_masks {
                Some(frozen) => frozen
                    .get(l)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("no frozen mask for layer {}", l + 1)))?,
                None => {
                    let prob = self.mask_prob(tape, states[l].mask_logits, t)?;
                    build_attention_mask(&prob, cfg.feature_resolutions[r], l)?
                }
            };
            x = masked_cross_attention(tape, x, feats[r], Some(pos[r]), Some(&mask), &layer.cross, cfg.heads)?;
            x = self_attention(tape, x, &layer.self_attn, cfg.heads)?;
            x = ffn(tape, x, &layer.ffn)?;
            masks.push(mask);
            states.push(self.heads(tape, &b, x, pixel)?);
        }
        Ok(Trace { frames: t, states, masks, pixel, attention_features: feats })
    }

    fn check_clip(&self, clip: &Tensor<F>) -> Result<(usize, usize, usize, usize)> {
        let (t, h, w, ch) = dims4("forward", clip)?;
        if t == 0 {
            return Err(Error::InvalidArgument("clip has no frames".into()));
        }
        if (h, w) != self.config.frame_size || ch != 3 {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: clip.shape().to_vec(),
                right: vec![t, self.config.frame_size.0, self.config.frame_size.1, 3],
            });
        }
        if !clip.all_finite() {
            return Err(Error::InvalidArgument("clip contains non-finite values".into()));
        }
        Ok((t, h, w, ch))
    }

    /// Per-frame convolutional encoder with shared weights; no op mixes frames.
    fn encode(&self, tape: &mut Tape<F>, b: &BoundLayout, clip: &Tensor<F>) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.config;
        let (t, mut h, mut w, _) = dims4("encode", clip)?;
        let half = F::from_f64(0.5);
        let mut x = tape.constant(clip.map(|v| v - half));
        let mut pools_left = cfg.pool_count();
        for conv in &b.encoder {
            let cols = tape.unfold(x, 3)?;
            let y = conv.apply(tape, cols)?;
            let y = tape.relu(y);
            let cout = tape.shape(y)[1];
            x = tape.reshape(y, &[t, h, w, cout])?;
            if pools_left > 0 {
                x = tape.avg_pool(x, 2)?;
                h /= 2;
                w /= 2;
                pools_left -= 1;
            }
        }
        let trunk_c = tape.shape(x)[3];
        let flat = tape.reshape(x, &[t * h * w, trunk_c])?;
        let pixel = b.pixel_proj.apply(tape, flat)?;
        let mut feats = Vec::with_capacity(cfg.feature_resolutions.len());
        for (i, &(fh, _)) in cfg.feature_resolutions.iter().enumerate() {
            let factor = h / fh;
            let pooled = if factor > 1 { tape.avg_pool(x, factor)? } else { x };
            let n = tape.value(pooled).len() / trunk_c;
            let flat = tape.reshape(pooled, &[n, trunk_c])?;
            feats.push(b.feature_proj[i].apply(tape, flat)?);
        }
        Ok((pixel, feats))
    }

    fn heads(&self, tape: &mut Tape<F>, b: &BoundLayout, x: Var, pixel: Var) -> Result<StateVars> {
        let xn = b.head_norm.apply(tape, x)?;
        let class_logits = b.class_head.apply(tape, xn)?;
        let mut e = xn;
        for (i, lin) in b.mask_mlp.iter().enumerate() {
            e = lin.apply(tape, e)?;
            if i + 1 < b.mask_mlp.len() {
                e = tape.relu(e);
            }
        }
        let mask_logits = tape.matmul_t(e, pixel)?;
        Ok(StateVars { queries: x, mask_logits, class_logits })
    }

    fn mask_prob(&self, tape: &Tape<F>, mask_logits: Var, frames: usize) -> Result<Tensor<F>> {
        let (mh, mw) = self.config.mask_resolution;
        tape.value(mask_logits).sigmoid().reshape(&[self.config.num_queries, frames, mh, mw])
    }

    /// Inference-only forward; returns the `L + 1` decoder states.
    pub fn forward(&self, clip: &Tensor<F>) -> Result<Vec<DecoderState<F>>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let trace = self.forward_tape(&mut tape, &vars, clip, &ForwardOptions::default())?;
        trace
            .states
            .iter()
            .enumerate()
            .map(|(l, s)| {
                Ok(DecoderState {
                    layer_index: l,
                    queries: tape.value(s.queries).clone(),
                    mask_prob: self.mask_prob(&tape, s.mask_logits, trace.frames)?,
                    class_logits: tape.value(s.class_logits).clone(),
                })
            })
            .collect()
    }

    pub fn pixel_encoder(&self, clip: &Tensor<F>) -> Result<FeatureVolume<F>> {
        let (t, _, _, _) = self.check_clip(clip)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let b = self.layout.bind(&vars);
        let (pixel, feats) = self.encode(&mut tape, &b, clip)?;
        let c = self.config.width;
        let (mh, mw) = self.config.mask_resolution;
        let pixel = tape.value(pixel).clone().reshape(&[t, mh, mw, c])?;
        let attention = feats
            .iter()
            .zip(&self.config.feature_resolutions)
            .map(|(&v, &(h, w))| tape.value(v).clone().reshape(&[t, h, w, c]))
            .collect::<Result<_>>()?;
        Ok(FeatureVolume { pixel, attention })
    }

    /// Runs the whole clip through the model and keeps the `top_k` best
    /// (query, class) pairs, with masks upsampled to the frame size.
    pub fn infer(&self, clip: &Tensor<F>, top_k: usize) -> Result<Vec<InstanceResult>> {
        let states = self.forward(clip)?;
        let last = states.last().expect("forward yields at least one state");
        extract_instances(last, top_k, self.config.frame_size)
    }
}

impl<F: Real> ParamStore<F> {
    /// 3×3 convolution weights laid out for [`Tape::unfold`] columns.
    fn conv(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Linear {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| F::from_f64(rng.gen_range(-bound..bound)));
        let w = self.insert(&format!("{name}.weight"), group, w);
        let b = self.insert(&format!("{name}.bias"), group, Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }
}

/// `M[n,t,h,w] = sigmoid(E_mask[n] · E_pixel[t,h,w])`.
///
/// `mask_embed: [N,C]`, `pixel: [T,H,W,C]` → `[N,T,H,W]`.
pub fn predict_masks<F: Real>(mask_embed: &Tensor<F>, pixel: &Tensor<F>) -> Result<Tensor<F>> {
    let (t, h, w, c) = dims4("predict_masks", pixel)?;
    let n = mask_embed.shape().first().copied().unwrap_or(0);
    if mask_embed.shape() != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "predict_masks",
            left: mask_embed.shape().to_vec(),
            right: pixel.shape().to_vec(),
        });
    }
    let flat = pixel.clone().reshape(&[t * h * w, c])?;
    mask_embed.matmul_t(&flat)?.sigmoid().reshape(&[n, t, h, w])
}

/// Per-query class distribution over `K + 1` outputs.
pub fn class_probabilities<F: Real>(class_logits: &Tensor<F>) -> Result<Tensor<F>> {
    class_logits.softmax_lastdim()
}

/// Scores every (query, real class) pair by its class probability, keeps the
/// `top_k` highest, and binarizes each chosen query's mask at `out_hw`.
pub fn extract_instances<F: Real>(
    state: &DecoderState<F>,
    top_k: usize,
    out_hw: (usize, usize),
) -> Result<Vec<InstanceResult>> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    let (n, k1) = match state.class_logits.shape() {
        &[n, k1] if k1 >= 2 => (n, k1),
        s => return Err(Error::Rank { op: "extract_instances", expected: 2, shape: s.to_vec() }),
    };
    let k = k1 - 1;
    let mut probs = state.class_logits.data().to_vec();
    probs.chunks_mut(k1).for_each(softmax_in_place);
    let mut candidates: Vec<(f64, usize, usize)> =
        (0..n).flat_map(|q| (0..k).map(move |c| (q, c))).map(|(q, c)| (probs[q * k1 + c].as_f64(), q, c)).collect();
    // descending score, ties by (query, class)
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    candidates.truncate(top_k);

    let (_, t, _, _) = dims4("extract_instances", &state.mask_prob)?;
    let upsampled = resize_volume(&state.mask_prob, out_hw.0, out_hw.1)?;
    let plane = t * out_hw.0 * out_hw.1;
    let threshold = F::from_f64(MASK_THRESHOLD);
    candidates
        .into_iter()
        .map(|(score, q, c)| {
            let bits = upsampled.data()[q * plane..(q + 1) * plane].iter().map(|&p| p >= threshold).collect();
            Ok(InstanceResult {
                class_id: c,
                score,
                mask: BinaryMask::from_bits(t, out_hw.0, out_hw.1, bits)?,
                query_index: q,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(t: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[t, h, w, 3], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::tiny().validate().is_ok());
        let mut c = ModelConfig::tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.num_queries = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.feature_resolutions = vec![(3, 3)];
        assert!(c.validate().is_err());
    }

    #[test]
    fn shapes_through_the_model() {
        let cfg = ModelConfig::tiny();
        let model = Model::<f64>::new(cfg.clone(), 0).unwrap();
        for t in [1, 2, 3] {
            let states = model.forward(&clip(t, 8, 8, 1)).unwrap();
            assert_eq!(states.len(), cfg.layers + 1);
            for (l, s) in states.iter().enumerate() {
                assert_eq!(s.layer_index, l);
                assert_eq!(s.mask_prob.shape(), &[3, t, 4, 4]);
                assert_eq!(s.class_logits.shape(), &[3, 3]);
                assert!(s.mask_prob.data().iter().all(|&p| p > 0.0 && p < 1.0));
            }
            let fv = model.pixel_encoder(&clip(t, 8, 8, 1)).unwrap();
            assert_eq!(fv.pixel.shape(), &[t, 4, 4, 8]);
            assert_eq!(fv.attention[1].shape(), &[t, 2, 2, 8]);
        }
        assert!(model.forward(&Tensor::zeros(&[0, 8, 8, 3])).is_err());
        assert!(model.forward(&Tensor::zeros(&[1, 4, 8, 3])).is_err());
    }

    #[test]
    fn constant_clip_gives_spatially_constant_interior_features() {
        let cfg = ModelConfig {
            frame_size: (16, 16),
            mask_resolution: (4, 4),
            feature_resolutions: vec![(4, 4)],
            ..ModelConfig::tiny()
        };
        let model = Model::<f64>::new(cfg, 2).unwrap();
        let mut c = Tensor::zeros(&[2, 16, 16, 3]);
        for (i, v) in c.data_mut().iter_mut().enumerate() {
            *v = [0.2, 0.7, 0.4][i % 3];
        }
        let fv = model.pixel_encoder(&c).unwrap();
        // zero padding only touches the border; interior cells see identical input
        let px = fv.pixel.data();
        let at = |t: usize, y: usize, x: usize, ch: usize| px[((t * 4 + y) * 4 + x) * 8 + ch];
        for t in 0..2 {
            for ch in 0..8 {
                assert!((at(t, 1, 1, ch) - at(t, 2, 2, ch)).abs() < 1e-12);
                assert!((at(t, 1, 2, ch) - at(0, 2, 1, ch)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_masks_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, t, h, w, c) = (3, 2, 3, 4, 5);
        let e = Tensor::<f64>::from_fn(&[n, c], |_| rng.gen_range(-1.0..1.0));
        let px = Tensor::<f64>::from_fn(&[t, h, w, c], |_| rng.gen_range(-1.0..1.0));
        let m = predict_masks(&e, &px).unwrap();
        for q in 0..n {
            for ti in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        let dot: f64 =
                            (0..c).map(|ch| e.data()[q * c + ch] * px.data()[((ti * h + y) * w + x) * c + ch]).sum();
                        let want = 1.0 / (1.0 + (-dot).exp());
                        assert!((m.data()[((q * t + ti) * h + y) * w + x] - want).abs() < 1e-12);
                    }
                }
            }
        }
        let zero = Tensor::<f64>::zeros(&[2, c]);
        assert!(predict_masks(&zero, &px).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(predict_masks(&Tensor::<f64>::zeros(&[2, 4]), &px).is_err());
    }

    #[test]
    fn orthogonal_embedding_gives_half() {
        let e = Tensor::<f64>::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let px = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| if i % 2 == 0 { 0.0 } else { 3.0 });
        assert!(predict_masks(&e, &px).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn class_head_zero_weights_uniform_and_shift_invariant() {
        let cfg = ModelConfig::tiny();
        let mut model = Model::<f64>::new(cfg, 3).unwrap();
        let (w, b) = (model.layout.class_head.w, model.layout.class_head.b);
        model.params.get_mut(w).tensor.data_mut().fill(0.0);
        model.params.get_mut(b).tensor.data_mut().fill(0.0);
        let s = model.forward(&clip(2, 8, 8, 5)).unwrap();
        let p = class_probabilities(&s[2].class_logits).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));

        let logits = Tensor::<f64>::new(vec![1, 3], vec![0.3, 1.2, -0.4]).unwrap();
        let shifted = logits.map(|v| v + 17.0);
        let argmax = |t: &Tensor<f64>| {
            let p = class_probabilities(t).unwrap();
            (0..3).max_by(|&a, &b| p.data()[a].total_cmp(&p.data()[b])).unwrap()
        };
        assert_eq!(argmax(&logits), argmax(&shifted));
    }

    #[test]
    fn duplicated_frames_without_temporal_encoding_agree() {
        let cfg = ModelConfig { temporal_encoding: false, ..ModelConfig::tiny() };
        let model = Model::<f64>::new(cfg, 6).unwrap();
        let one = clip(1, 8, 8, 7);
        let mut dup = Tensor::zeros(&[3, 8, 8, 3]);
        for t in 0..3 {
            dup.data_mut()[t * 192..(t + 1) * 192].copy_from_slice(one.data());
        }
        let states = model.forward(&dup).unwrap();
        for s in &states {
            let m = s.mask_prob.data();
            for q in 0..3 {
                for t in 1..3 {
                    for i in 0..16 {
                        assert!((m[(q * 3 + t) * 16 + i] - m[(q * 3) * 16 + i]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn layer_masks_come_from_previous_state() {
        let model = Model::<f64>::new(ModelConfig::tiny(), 8).unwrap();
        let c = clip(2, 8, 8, 9);
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let trace = model.forward_tape(&mut tape, &vars, &c, &ForwardOptions::default()).unwrap();
        assert_eq!(trace.masks.len(), 2);
        for (l, m) in trace.masks.iter().enumerate() {
            assert_eq!(m.source_layer, l);
            let prob = model.mask_prob(&tape, trace.states[l].mask_logits, 2).unwrap();
            let res = model.config.feature_resolutions[l % 2];
            assert_eq!(&build_attention_mask(&prob, res, l).unwrap(), m);
        }
    }

    #[test]
    fn permuting_queries_permutes_outputs() {
        let mut model = Model::<f64>::new(ModelConfig::tiny(), 10).unwrap();
        let c = clip(2, 8, 8, 11);
        let base = model.forward(&c).unwrap();
        let perm = [2usize, 0, 1];
        let qid = model.layout.queries;
        let orig = model.params.get(qid).tensor.clone();
        let width = 8;
        let q = model.params.get_mut(qid).tensor.data_mut();
        for (i, &src) in perm.iter().enumerate() {
            q[i * width..(i + 1) * width].copy_from_slice(&orig.data()[src * width..(src + 1) * width]);
        }
        let permuted = model.forward(&c).unwrap();
        for (a, b) in base.iter().zip(&permuted) {
            let plane = 2 * 16;
            for (i, &src) in perm.iter().enumerate() {
                for j in 0..plane {
                    assert!((b.mask_prob.data()[i * plane + j] - a.mask_prob.data()[src * plane + j]).abs() < 1e-9);
                }
                for j in 0..3 {
                    assert!((b.class_logits.data()[i * 3 + j] - a.class_logits.data()[src * 3 + j]).abs() < 1e-9);
                }
            }
        }
    }

    fn state(logits: Vec<f64>, n: usize) -> DecoderState<f64> {
        DecoderState {
            layer_index: 0,
            queries: Tensor::zeros(&[n, 4]),
            mask_prob: Tensor::from_fn(&[n, 2, 2, 2], |i| if i % 3 == 0 { 0.9 } else { 0.1 }),
            class_logits: Tensor::new(vec![n, 3], logits).unwrap(),
        }
    }

    #[test]
    fn extract_instances_orders_by_score() {
        let logits = vec![2.0, 0.0, 0.0, 0.0, 3.0, 0.0, -1.0, -1.0, 4.0, 0.5, 0.4, 0.3];
        let s = state(logits.clone(), 4);
        let out = extract_instances(&s, 5, (4, 4)).unwrap();
        assert_eq!(out.len(), 5);
        // sort oracle over every (query, class) pair
        let mut all = Vec::new();
        for q in 0..4 {
            let row = &logits[q * 3..q * 3 + 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..2 {
                all.push((row[c].exp() / z, q, c));
            }
        }
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for (r, want) in out.iter().zip(&all) {
            assert_eq!((r.query_index, r.class_id), (want.1, want.2));
            assert!((r.score - want.0).abs() < 1e-12);
            assert_eq!(r.mask.shape(), [2, 4, 4]);
        }
        assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(extract_instances(&s, 0, (4, 4)).is_err());
    }

    #[test]
    fn certain_no_object_scores_vanish() {
        let s = state(vec![-60.0, -60.0, 60.0, -60.0, -60.0, 60.0], 2);
        let out = extract_instances(&s, 10, (2, 2)).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|r| r.score <= f64::EPSILON));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f32>::new(ModelConfig::tiny(), 42).unwrap();
        let b = Model::<f32>::new(ModelConfig::tiny(), 42).unwrap();
        assert_eq!(a, b);
        let c = Model::<f32>::new(ModelConfig::tiny(), 43).unwrap();
        assert_ne!(a, c);
    }
}
