//! PNG renders of predicted masks over clip frames.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use image::{Rgb, RgbImage};
use stmask_core::decoder::InstanceResult;
use stmask_core::Tensor;

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

/// One image per frame: the frame on the left and the predictions with
/// `score ≥ min_score` blended over it on the right, upscaled by `scale`.
/// Returns the written paths.
pub fn render_overlays(
    frames: &Tensor<f32>,
    preds: &[InstanceResult],
    min_score: f64,
    scale: u32,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    ensure!(frames.rank() == 4 && frames.shape()[3] == 3, "frames must be [T,H,W,3], got {:?}", frames.shape());
    ensure!(scale >= 1, "scale must be at least 1");
    let (t, h, w) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
    for p in preds {
        ensure!(p.mask.shape() == [t, h, w], "mask {:?} does not match clip {t}x{h}x{w}", p.mask.shape());
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let shown: Vec<&InstanceResult> = preds.iter().filter(|p| p.score >= min_score).collect();
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut paths = Vec::with_capacity(t);
    for f in 0..t {
        let mut img = RgbImage::new(2 * w as u32 * scale, h as u32 * scale);
        for y in 0..h {
            for x in 0..w {
                let i = ((f * h + y) * w + x) * 3;
                let px = [to_u8(frames.data()[i]), to_u8(frames.data()[i + 1]), to_u8(frames.data()[i + 2])];
                let mut blended = px;
                for (k, p) in shown.iter().enumerate() {
                    if p.mask.get(f, y, x) {
                        let c = PALETTE[k % PALETTE.len()];
                        blended = [0, 1, 2].map(|j| ((blended[j] as u16 + c[j] as u16) / 2) as u8);
                    }
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let (yy, xx) = (y as u32 * scale + dy, x as u32 * scale + dx);
                        img.put_pixel(xx, yy, Rgb(px));
                        img.put_pixel(xx + w as u32 * scale, yy, Rgb(blended));
                    }
                }
            }
        }
        let path = out_dir.join(format!("{stem}_t{f:02}.png"));
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use stmask_core::mask::BinaryMask;

    #[test]
    fn writes_one_png_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let frames = Tensor::full(&[3, 4, 5, 3], 0.2f32);
        let mut m = BinaryMask::empty(3, 4, 5);
        m.set(1, 1, 1, true);
        let preds = vec![InstanceResult { class_id: 0, score: 0.9, mask: m, query_index: 0 }];
        let paths = render_overlays(&frames, &preds, 0.5, 2, dir.path(), "c").unwrap();
        assert_eq!(paths.len(), 3);
        let img = image::open(&paths[1]).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (20, 8));
        assert_ne!(img.get_pixel(10 + 2, 2), img.get_pixel(2, 2));
        assert_eq!(img.get_pixel(10, 0), img.get_pixel(0, 0));
    }
}
