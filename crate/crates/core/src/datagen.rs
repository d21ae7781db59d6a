//! Deterministic synthetic videos of colored shapes in linear motion.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::GroundTruthInstance;
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Disc,
    Rectangle,
}

impl ShapeKind {
    pub fn class_id(self) -> usize {
        match self {
            ShapeKind::Disc => 0,
            ShapeKind::Rectangle => 1,
        }
    }
}

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub frame_size: (usize, usize),
    pub frames: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Disc radius range in pixels.
    pub radius: (f64, f64),
    /// Rectangle half-extent range in pixels, per axis.
    pub half_extent: (f64, f64),
    /// Largest per-frame displacement along each axis.
    pub max_speed: f64,
    /// Every instance keeps at least this fraction of its own area visible
    /// in every frame.
    pub min_visible: f64,
    /// Two discs on opposite horizontal paths that pass each other mid-clip.
    pub crossing: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            frame_size: (64, 64),
            frames: 8,
            min_instances: 1,
            max_instances: 3,
            radius: (6.0, 11.0),
            half_extent: (5.0, 11.0),
            max_speed: 2.5,
            min_visible: 0.3,
            crossing: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.frame_size;
        let extent = self.radius.1.max(self.half_extent.1);
        if self.frames == 0 || h == 0 || w == 0 {
            return Err(Error::Config("clip needs at least one frame and a nonzero size".into()));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::Config(format!(
                "instance range {}..={} is invalid",
                self.min_instances, self.max_instances
            )));
        }
        if self.radius.0 <= 0.0
            || self.radius.0 > self.radius.1
            || self.half_extent.0 <= 0.0
            || self.half_extent.0 > self.half_extent.1
        {
            return Err(Error::Config("shape size ranges must be positive and ordered".into()));
        }
        if 2.0 * extent + 2.0 > h.min(w) as f64 {
            return Err(Error::ShapeTooLarge(format!("extent {extent} does not fit a {h}x{w} frame")));
        }
        if !(0.0..=1.0).contains(&self.min_visible) || self.max_speed < 0.0 {
            return Err(Error::Config("min_visible must lie in [0,1] and max_speed be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeMeta {
    pub kind: ShapeKind,
    pub color: [f32; 3],
    /// `(y, x)` center at frame 0.
    pub start: (f64, f64),
    /// Pixels per frame, `(dy, dx)`.
    pub velocity: (f64, f64),
    /// Radius for discs, `(half_h, half_w)` for rectangles (equal for discs).
    pub size: (f64, f64),
}

impl ShapeMeta {
    fn center(&self, t: usize) -> (f64, f64) {
        (self.start.0 + self.velocity.0 * t as f64, self.start.1 + self.velocity.1 * t as f64)
    }

    fn covers(&self, t: usize, y: usize, x: usize) -> bool {
        let (cy, cx) = self.center(t);
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        match self.kind {
            ShapeKind::Disc => dy * dy + dx * dx <= self.size.0 * self.size.0,
            ShapeKind::Rectangle => dy.abs() <= self.size.0 && dx.abs() <= self.size.1,
        }
    }

    fn extent(&self) -> (f64, f64) {
        self.size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    /// `[T,H,W,3]` in `[0,1]`.
    pub frames: Tensor<f32>,
    /// Exact post-occlusion occupancy, in drawing order.
    pub instances: Vec<GroundTruthInstance>,
    pub seed: u64,
    pub meta: Vec<ShapeMeta>,
    pub background: [f32; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Even seeds train, odd seeds validate.
pub fn split_for_seed(seed: u64) -> Split {
    if seed.is_multiple_of(2) {
        Split::Train
    } else {
        Split::Val
    }
}

const MAX_ATTEMPTS: usize = 200;

pub fn generate_clip(cfg: &GenConfig, seed: u64) -> Result<SyntheticClip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let meta = if cfg.crossing { crossing_layout(cfg, &mut rng) } else { random_layout(cfg, &mut rng) };
        let background = {
            let g = rng.gen_range(0.04f32..0.14);
            [g, g, g]
        };
        let masks = rasterize(cfg, &meta);
        let visible_enough = meta.iter().zip(&masks).all(|(m, mask)| {
            let alone = rasterize(cfg, core::slice::from_ref(m)).pop().expect("one shape");
            (0..cfg.frames).all(|t| {
                let full = alone.frame_count(t);
                full > 0 && mask.frame_count(t) as f64 >= cfg.min_visible * full as f64
            })
        });
        if !visible_enough {
            continue;
        }
        let frames = paint(cfg, &meta, &masks, background);
        let instances =
            meta.iter().zip(masks).map(|(m, mask)| GroundTruthInstance { class_id: m.kind.class_id(), mask }).collect();
        return Ok(SyntheticClip { frames, instances, seed, meta, background });
    }
    Err(Error::ShapeTooLarge(format!("no layout with enough visibility after {MAX_ATTEMPTS} attempts (seed {seed})")))
}

fn random_color(rng: &mut ChaCha8Rng, taken: &[[f32; 3]]) -> [f32; 3] {
    let mut best = [1.0, 1.0, 1.0];
    let mut best_gap = -1.0f32;
    for _ in 0..32 {
        let c = [rng.gen_range(0.25f32..1.0), rng.gen_range(0.25f32..1.0), rng.gen_range(0.25f32..1.0)];
        let gap = taken.iter().map(|o| (0..3).map(|i| (c[i] - o[i]).abs()).sum::<f32>()).fold(f32::INFINITY, f32::min);
        if gap >= 0.6 {
            return c;
        }
        if gap > best_gap {
            best_gap = gap;
            best = c;
        }
    }
    best
}

fn random_layout(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<ShapeMeta> {
    let count = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let mut colors = Vec::new();
    (0..count)
        .map(|_| {
            let kind = if rng.gen_bool(0.5) { ShapeKind::Disc } else { ShapeKind::Rectangle };
            let size = match kind {
                ShapeKind::Disc => {
                    let r = rng.gen_range(cfg.radius.0..=cfg.radius.1);
                    (r, r)
                }
                ShapeKind::Rectangle => (
                    rng.gen_range(cfg.half_extent.0..=cfg.half_extent.1),
                    rng.gen_range(cfg.half_extent.0..=cfg.half_extent.1),
                ),
            };
            let color = random_color(rng, &colors);
            colors.push(color);
            let (start, velocity) = linear_path(cfg, size, rng);
            ShapeMeta { kind, color, start, velocity, size }
        })
        .collect()
}

/// Start and end centers inside the margins, so every frame keeps the whole
/// shape in bounds.
fn linear_path(cfg: &GenConfig, size: (f64, f64), rng: &mut ChaCha8Rng) -> ((f64, f64), (f64, f64)) {
    let (h, w) = (cfg.frame_size.0 as f64, cfg.frame_size.1 as f64);
    let span = (cfg.frames.max(2) - 1) as f64;
    let axis = |rng: &mut ChaCha8Rng, extent: f64, len: f64| {
        let (lo, hi) = (extent + 1.0, len - extent - 1.0);
        let start = rng.gen_range(lo..=hi);
        let reach = cfg.max_speed * span;
        let end = rng.gen_range((start - reach).max(lo)..=(start + reach).min(hi));
        (start, if cfg.frames > 1 { (end - start) / span } else { 0.0 })
    };
    let (sy, vy) = axis(rng, size.0, h);
    let (sx, vx) = axis(rng, size.1, w);
    ((sy, sx), (vy, vx))
}

fn crossing_layout(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<ShapeMeta> {
    let (h, w) = (cfg.frame_size.0 as f64, cfg.frame_size.1 as f64);
    let r = rng.gen_range(cfg.radius.0..=cfg.radius.1.min(0.5 * (cfg.radius.0 + cfg.radius.1)));
    let span = (cfg.frames.max(2) - 1) as f64;
    let cy = h / 2.0 + rng.gen_range(-2.0..2.0);
    let offset = r * 0.9;
    let (left, right) = (r + 1.0, w - r - 1.0);
    let first = random_color(rng, &[]);
    let second = random_color(rng, &[first]);
    let v = if cfg.frames > 1 { (right - left) / span } else { 0.0 };
    vec![
        ShapeMeta { kind: ShapeKind::Disc, color: first, start: (cy - offset, left), velocity: (0.0, v), size: (r, r) },
        ShapeMeta {
            kind: ShapeKind::Disc,
            color: second,
            start: (cy + offset, right),
            velocity: (0.0, -v),
            size: (r, r),
        },
    ]
}

/// Occupancy after occlusion; later shapes cover earlier ones.
fn rasterize(cfg: &GenConfig, meta: &[ShapeMeta]) -> Vec<BinaryMask> {
    let (h, w) = cfg.frame_size;
    let mut owner = vec![usize::MAX; cfg.frames * h * w];
    for (i, m) in meta.iter().enumerate() {
        let (ey, ex) = m.extent();
        for t in 0..cfg.frames {
            let (cy, cx) = m.center(t);
            let y0 = (cy - ey - 1.0).floor().max(0.0) as usize;
            let y1 = ((cy + ey + 1.0).ceil() as usize).min(h);
            let x0 = (cx - ex - 1.0).floor().max(0.0) as usize;
            let x1 = ((cx + ex + 1.0).ceil() as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    if m.covers(t, y, x) {
                        owner[(t * h + y) * w + x] = i;
                    }
                }
            }
        }
    }
    (0..meta.len())
        .map(|i| BinaryMask::from_bits(cfg.frames, h, w, owner.iter().map(|&o| o == i).collect()).expect("dims match"))
        .collect()
}

fn paint(cfg: &GenConfig, meta: &[ShapeMeta], masks: &[BinaryMask], background: [f32; 3]) -> Tensor<f32> {
    let (h, w) = cfg.frame_size;
    let voxels = cfg.frames * h * w;
    let mut data = Vec::with_capacity(voxels * 3);
    for _ in 0..voxels {
        data.extend_from_slice(&background);
    }
    for (m, mask) in meta.iter().zip(masks) {
        for (v, _) in mask.bits().iter().enumerate().filter(|(_, &b)| b) {
            data[v * 3..v * 3 + 3].copy_from_slice(&m.color);
        }
    }
    Tensor::new(vec![cfg.frames, h, w, 3], data).expect("dims match")
}

/// Frames `start..start+len` of a clip with its instances, dropping any
/// instance that is absent from the whole window.
pub fn window(
    frames: &Tensor<f32>,
    instances: &[GroundTruthInstance],
    start: usize,
    len: usize,
) -> Result<(Tensor<f32>, Vec<GroundTruthInstance>)> {
    let shape = frames.shape();
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    if len == 0 || start + len > t {
        return Err(Error::InvalidArgument(format!("window {start}+{len} exceeds {t} frames")));
    }
    let plane = h * w * 3;
    let sliced = Tensor::new(vec![len, h, w, 3], frames.data()[start * plane..(start + len) * plane].to_vec())?;
    let gts = instances
        .iter()
        .map(|g| GroundTruthInstance { class_id: g.class_id, mask: g.mask.slice_frames(start, len) })
        .filter(|g| g.mask.count() > 0)
        .collect();
    Ok((sliced, gts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = GenConfig::default();
        assert_eq!(generate_clip(&cfg, 7).unwrap(), generate_clip(&cfg, 7).unwrap());
        assert_ne!(generate_clip(&cfg, 7).unwrap().frames, generate_clip(&cfg, 8).unwrap().frames);
    }

    #[test]
    fn static_shapes_keep_their_masks() {
        let cfg = GenConfig { max_speed: 0.0, ..GenConfig::default() };
        for seed in 0..10 {
            let clip = generate_clip(&cfg, seed).unwrap();
            for g in &clip.instances {
                let first = g.mask.slice_frames(0, 1);
                for t in 1..cfg.frames {
                    assert_eq!(g.mask.slice_frames(t, 1), first);
                }
            }
        }
    }

    #[test]
    fn disc_area_matches_analytic() {
        let cfg = GenConfig { max_instances: 1, ..GenConfig::default() };
        let mut discs = 0;
        for seed in 0..40 {
            let clip = generate_clip(&cfg, seed).unwrap();
            let m = &clip.meta[0];
            if m.kind != ShapeKind::Disc {
                continue;
            }
            discs += 1;
            let area = core::f64::consts::PI * m.size.0 * m.size.0;
            for t in 0..cfg.frames {
                let n = clip.instances[0].mask.frame_count(t) as f64;
                assert!((n - area).abs() <= 0.1 * area, "count {n} vs area {area}");
            }
        }
        assert!(discs > 5);
    }

    #[test]
    fn occlusion_and_color_agreement() {
        let cfg = GenConfig::default();
        for seed in 0..30 {
            let clip = generate_clip(&cfg, seed).unwrap();
            let (h, w) = cfg.frame_size;
            let px = clip.frames.data();
            for v in 0..cfg.frames * h * w {
                let owners: Vec<usize> =
                    (0..clip.instances.len()).filter(|&i| clip.instances[i].mask.bits()[v]).collect();
                assert!(owners.len() <= 1);
                let rgb = &px[v * 3..v * 3 + 3];
                match owners.first() {
                    Some(&i) => assert_eq!(rgb, clip.meta[i].color),
                    None => assert_eq!(rgb, clip.background),
                }
            }
            assert!(clip.instances.iter().all(|g| g.mask.count() > 0));
            assert!(!clip.instances.is_empty() && clip.instances.len() <= 3);
            assert!(px.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn crossing_paths_swap_sides() {
        let cfg = GenConfig { crossing: true, ..GenConfig::default() };
        let clip = generate_clip(&cfg, 3).unwrap();
        assert_eq!(clip.instances.len(), 2);
        assert!(clip.instances.iter().all(|g| g.class_id == 0));
        let (a, b) = (&clip.meta[0], &clip.meta[1]);
        assert!(a.center(0).1 < b.center(0).1);
        assert!(a.center(cfg.frames - 1).1 > b.center(cfg.frames - 1).1);
    }

    #[test]
    fn oversized_shapes_are_rejected() {
        let cfg = GenConfig { radius: (30.0, 40.0), ..GenConfig::default() };
        assert!(matches!(generate_clip(&cfg, 0), Err(Error::ShapeTooLarge(_))));
    }

    #[test]
    fn windows_slice_frames_and_instances() {
        let clip = generate_clip(&GenConfig::default(), 11).unwrap();
        let (f, gts) = window(&clip.frames, &clip.instances, 3, 2).unwrap();
        assert_eq!(f.shape(), &[2, 64, 64, 3]);
        assert!(gts.iter().all(|g| g.mask.frames() == 2 && g.mask.count() > 0));
        assert!(window(&clip.frames, &clip.instances, 7, 2).is_err());
    }

    #[test]
    fn seed_parity_split() {
        assert_eq!(split_for_seed(4), Split::Train);
        assert_eq!(split_for_seed(5), Split::Val);
    }
}
