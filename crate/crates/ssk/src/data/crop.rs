//! Region crop-box localization from predicted masks: one fixed box per
//! T-frame window, covering the union of the region's pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{classes, MaskFrame};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Eyes,
    Mouth,
}

impl RegionKind {
    pub fn classes(self) -> &'static [u8] {
        match self {
            RegionKind::Eyes => &[classes::EYES],
            RegionKind::Mouth => &[classes::OUTER_MOUTH, classes::INNER_MOUTH],
        }
    }
}

/// Axis-aligned crop in source pixels, constant across one window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub kind: RegionKind,
    /// Set when the region was absent in every frame and the box fell back
    /// to a default anchored at the mask centroid.
    pub fallback: bool,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    /// Expansion of the tight union box, as a fraction of its size.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Uniform jitter amplitude as a fraction of the box size; zero at
    /// inference time.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

pub fn default_crop_margin() -> f64 {
    0.5
}

fn default_margin() -> f64 {
    default_crop_margin()
}

fn default_noise() -> f64 {
    0.1
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig { margin: default_margin(), noise: default_noise() }
    }
}

/// Bounding box of the union of the region's pixels over the window,
/// expanded by the margin, jittered by `noise`, clamped to frame bounds.
/// A window with no region pixels falls back to a default box around the
/// centroid of all foreground pixels (frame centre if none), flagged.
pub fn localize_crop_boxes(
    masks: &[MaskFrame],
    kind: RegionKind,
    cfg: &CropConfig,
    rng: &mut impl Rng,
) -> Result<CropBox> {
    if masks.is_empty() {
        return Err(Error::arg("localize_crop_boxes", "no masks in window".to_string()));
    }
    let (w, h) = (masks[0].width(), masks[0].height());
    for m in masks {
        if m.width() != w || m.height() != h {
            return Err(Error::shape(
                "localize_crop_boxes",
                format!("mask {}x{} differs from window {}x{}", m.width(), m.height(), w, h),
            ));
        }
    }
    let wanted = kind.classes();
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut found = false;
    for m in masks {
        for y in 0..h {
            for x in 0..w {
                if wanted.contains(&m.get(x, y)) {
                    found = true;
                    min_x = min_x.min(x);
                    min_y = min_y.min(y);
                    max_x = max_x.max(x);
                    max_y = max_y.max(y);
                }
            }
        }
    }

    let (bx, by, bw, bh, fallback) = if found {
        (
            min_x as f64,
            min_y as f64,
            (max_x - min_x + 1) as f64,
            (max_y - min_y + 1) as f64,
            false,
        )
    } else {
        // Centroid of any foreground pixel over the window.
        let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
        for m in masks {
            for y in 0..h {
                for x in 0..w {
                    if m.get(x, y) != classes::BACKGROUND {
                        sx += x as f64;
                        sy += y as f64;
                        count += 1;
                    }
                }
            }
        }
        let (cx, cy) = if count > 0 {
            (sx / count as f64, sy / count as f64)
        } else {
            (w as f64 / 2.0, h as f64 / 2.0)
        };
        let dw = w as f64 / 4.0;
        let dh = h as f64 / 4.0;
        log::warn!("{kind:?} region absent in window; using centroid fallback box");
        (cx - dw / 2.0, cy - dh / 2.0, dw, dh, true)
    };

    let mut x0 = bx - cfg.margin * bw / 2.0;
    let mut y0 = by - cfg.margin * bh / 2.0;
    let mut x1 = bx + bw + cfg.margin * bw / 2.0;
    let mut y1 = by + bh + cfg.margin * bh / 2.0;
    if cfg.noise > 0.0 {
        let jw = cfg.noise * (x1 - x0);
        let jh = cfg.noise * (y1 - y0);
        let dx = rng.gen_range(-jw..=jw);
        let dy = rng.gen_range(-jh..=jh);
        x0 += dx;
        x1 += dx;
        y0 += dy;
        y1 += dy;
    }
    let x0 = (x0.floor().max(0.0) as usize).min(w - 1);
    let y0 = (y0.floor().max(0.0) as usize).min(h - 1);
    let x1 = (x1.ceil() as usize).clamp(x0 + 1, w);
    let y1 = (y1.ceil() as usize).clamp(y0 + 1, h);
    Ok(CropBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0, kind, fallback })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask_with_pixel(x: usize, y: usize, class: u8) -> MaskFrame {
        let mut m = MaskFrame::filled(32, 32, 0);
        m.set(x, y, class);
        m
    }

    #[test]
    fn single_pixel_box_centres_on_it() {
        let masks: Vec<MaskFrame> = (0..5).map(|_| mask_with_pixel(10, 10, classes::EYES)).collect();
        let cfg = CropConfig { margin: 0.5, noise: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = localize_crop_boxes(&masks, RegionKind::Eyes, &cfg, &mut rng).unwrap();
        assert!(!b.fallback);
        assert!(b.x <= 10 && 10 < b.x + b.w);
        assert!(b.y <= 10 && 10 < b.y + b.h);
    }

    #[test]
    fn drifting_region_is_covered_by_union() {
        let masks: Vec<MaskFrame> =
            (0..5).map(|t| mask_with_pixel(8 + 3 * t, 12, classes::OUTER_MOUTH)).collect();
        let cfg = CropConfig { margin: 0.0, noise: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = localize_crop_boxes(&masks, RegionKind::Mouth, &cfg, &mut rng).unwrap();
        assert!(b.x <= 8);
        assert!(b.x + b.w > 8 + 12);
        assert_eq!(b.w, 13);
    }

    #[test]
    fn zero_noise_is_deterministic_nonzero_jitters() {
        let masks: Vec<MaskFrame> = (0..5).map(|_| mask_with_pixel(16, 16, classes::EYES)).collect();
        let quiet = CropConfig { margin: 0.5, noise: 0.0 };
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(999);
        let a = localize_crop_boxes(&masks, RegionKind::Eyes, &quiet, &mut r1).unwrap();
        let b = localize_crop_boxes(&masks, RegionKind::Eyes, &quiet, &mut r2).unwrap();
        assert_eq!(a, b);

        let noisy = CropConfig { margin: 4.0, noise: 0.3 };
        let mut r3 = ChaCha8Rng::seed_from_u64(1);
        let mut r4 = ChaCha8Rng::seed_from_u64(2);
        let c = localize_crop_boxes(&masks, RegionKind::Eyes, &noisy, &mut r3).unwrap();
        let d = localize_crop_boxes(&masks, RegionKind::Eyes, &noisy, &mut r4).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn absent_region_falls_back_flagged() {
        let masks: Vec<MaskFrame> = (0..5).map(|_| mask_with_pixel(5, 5, classes::SKIN)).collect();
        let cfg = CropConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = localize_crop_boxes(&masks, RegionKind::Eyes, &cfg, &mut rng).unwrap();
        assert!(b.fallback);
        assert!(b.w > 0 && b.h > 0);
        assert!(b.x + b.w <= 32 && b.y + b.h <= 32);
    }
}
