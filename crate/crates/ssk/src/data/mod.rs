//! Dataset plumbing: mask and landmark frames, sequence manifests, the
//! landmark-to-mask rasterizer, the synthetic clip generator, batching,
//! crop localization, and the temporal-smoothing baseline.

mod batch;
mod crop;
mod rasterize;
mod smooth;
pub mod spline;
mod subdataset;
mod synth;

pub use batch::{batch_sequences, Batch, BatchConfig};
pub use crop::{default_crop_margin, localize_crop_boxes, CropBox, CropConfig, RegionKind};
pub use rasterize::{fill_polygon_even_odd, landmarks_to_mask, region_layout, RegionLayout};
pub use smooth::{gaussian_window_weights, temporal_smooth};
pub use subdataset::{build_region_subdataset, SubdatasetConfig};
pub use synth::{synth_video_generate, SynthConfig, SynthDataset};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Face-mask class indices, fixed across the whole kit.
pub mod classes {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const EYES: u8 = 2;
    pub const OUTER_MOUTH: u8 = 3;
    pub const INNER_MOUTH: u8 = 4;
    pub const COUNT: usize = 5;

    pub const NAMES: [&str; 5] = ["background", "facial_skin", "eyes", "outer_mouth", "inner_mouth"];
}

/// Per-pixel class-index image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskFrame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl MaskFrame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Data(format!(
                "mask data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(MaskFrame { width, height, data })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        MaskFrame { width, height, data: vec![class; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; classes];
        for &c in &self.data {
            if (c as usize) < classes {
                counts[c as usize] += 1;
            }
        }
        counts
    }

    /// Nearest-neighbour resize on class indices.
    pub fn resize_nearest(&self, width: usize, height: usize) -> MaskFrame {
        let mut out = vec![0u8; width * height];
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let sy = sy.min(self.height - 1);
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                let sx = sx.min(self.width - 1);
                out[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        MaskFrame { width, height, data: out }
    }

    /// 8-bit single-channel PNG with raw class indices.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::Data("mask buffer does not match dimensions".to_string()))?;
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        MaskFrame::new(w, h, img.into_raw())
    }
}

/// 8-bit RGB frame.
#[derive(Clone, Debug)]
pub struct RgbFrame {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbFrame {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        RgbFrame { width, height, data }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::Data("frame buffer does not match dimensions".to_string()))?;
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        let (width, height) = (img.width() as usize, img.height() as usize);
        Ok(RgbFrame { width, height, data: img.into_raw() })
    }

    /// `[0,1]`-scaled channel-planar values, `[3, H, W]` row-major.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for ch in 0..3 {
                out[ch * hw + p] = self.data[p * 3 + ch] as f64 / 255.0;
            }
        }
        out
    }

    /// Pixel-rect crop, clamped to the frame.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> RgbFrame {
        let x1 = (x + w).min(self.width);
        let y1 = (y + h).min(self.height);
        let (cw, ch) = (x1.saturating_sub(x).max(1), y1.saturating_sub(y).max(1));
        let mut out = RgbFrame::filled(cw, ch, [0, 0, 0]);
        for yy in 0..ch {
            for xx in 0..cw {
                let sx = (x + xx).min(self.width - 1);
                let sy = (y + yy).min(self.height - 1);
                out.set(xx, yy, self.get(sx, sy));
            }
        }
        out
    }

    /// Bilinear resize of the image content (inference-path utility).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> RgbFrame {
        let mut out = RgbFrame::filled(width, height, [0, 0, 0]);
        let sy = if height > 1 { (self.height as f64 - 1.0) / (height as f64 - 1.0) } else { 0.0 };
        let sx = if width > 1 { (self.width as f64 - 1.0) / (width as f64 - 1.0) } else { 0.0 };
        for y in 0..height {
            let fy = y as f64 * sy;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = x as f64 * sx;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let mut rgb = [0u8; 3];
                for (ch, out) in rgb.iter_mut().enumerate() {
                    let v = self.get(x0, y0)[ch] as f64 * (1.0 - wy) * (1.0 - wx)
                        + self.get(x1, y0)[ch] as f64 * (1.0 - wy) * wx
                        + self.get(x0, y1)[ch] as f64 * wy * (1.0 - wx)
                        + self.get(x1, y1)[ch] as f64 * wy * wx;
                    *out = v.round().clamp(0.0, 255.0) as u8;
                }
                out.set(x, y, rgb);
            }
        }
        out
    }
}

/// The 68 (x, y) landmark points of one frame, in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkFrame {
    pub points: Vec<(f64, f64)>,
}

pub const LANDMARK_COUNT: usize = 68;

impl LandmarkFrame {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::Data(format!("expected {} landmarks, got {}", LANDMARK_COUNT, points.len())));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Data("landmark coordinates must be finite".to_string()));
        }
        Ok(LandmarkFrame { points })
    }

    /// Parses a per-frame text file of 68 `x y` lines.
    pub fn from_pts_text(text: &str) -> Result<Self> {
        let mut points = Vec::with_capacity(LANDMARK_COUNT);
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let x: f64 = it
                .next()
                .ok_or_else(|| Error::Data("landmark line missing x".to_string()))?
                .parse()
                .map_err(|e| Error::Data(format!("bad landmark x: {e}")))?;
            let y: f64 = it
                .next()
                .ok_or_else(|| Error::Data("landmark line missing y".to_string()))?
                .parse()
                .map_err(|e| Error::Data(format!("bad landmark y: {e}")))?;
            points.push((x, y));
        }
        LandmarkFrame::new(points)
    }

    pub fn clamped(&self, width: usize, height: usize) -> LandmarkFrame {
        let points = self
            .points
            .iter()
            .map(|&(x, y)| (x.clamp(0.0, width as f64 - 1.0), y.clamp(0.0, height as f64 - 1.0)))
            .collect();
        LandmarkFrame { points }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub subject: String,
    /// Stored relative to the manifest file; resolved on load.
    pub frames: Vec<PathBuf>,
    pub masks: Vec<PathBuf>,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
}

/// Manifest of one dataset split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub schema_version: u32,
    pub split: Split,
    pub clips: Vec<ClipEntry>,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

impl SequenceManifest {
    pub fn new(split: Split, clips: Vec<ClipEntry>) -> Self {
        SequenceManifest { schema_version: MANIFEST_SCHEMA_VERSION, split, clips }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: SequenceManifest = serde_json::from_str(&text)?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "manifest schema version {} unsupported (expected {})",
                manifest.schema_version, MANIFEST_SCHEMA_VERSION
            )));
        }
        for clip in &manifest.clips {
            if clip.frames.len() != clip.masks.len() {
                return Err(Error::Data(format!(
                    "clip {}: {} frames but {} masks",
                    clip.id,
                    clip.frames.len(),
                    clip.masks.len()
                )));
            }
        }
        let root = path.parent().unwrap_or_else(|| Path::new("."));
        Ok(manifest.resolved(root))
    }

    /// Joins every relative clip path onto `root`.
    pub fn resolved(&self, root: &Path) -> SequenceManifest {
        let mut out = self.clone();
        for clip in &mut out.clips {
            for p in clip.frames.iter_mut().chain(clip.masks.iter_mut()) {
                if p.is_relative() {
                    *p = root.join(&p);
                }
            }
        }
        out
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.clips.iter().map(|c| c.subject.as_str()).collect()
    }

    pub fn total_frames(&self) -> usize {
        self.clips.iter().map(|c| c.frames.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_frame_validates_length() {
        assert!(MaskFrame::new(3, 2, vec![0; 5]).is_err());
        assert!(MaskFrame::new(3, 2, vec![0; 6]).is_ok());
    }

    #[test]
    fn nearest_resize_round_trips_block_mask() {
        let mut m = MaskFrame::filled(4, 4, 0);
        for y in 0..2 {
            for x in 0..2 {
                m.set(x, y, 3);
            }
        }
        let up = m.resize_nearest(8, 8);
        let back = up.resize_nearest(4, 4);
        assert_eq!(back, m);
    }

    #[test]
    fn pts_text_round_trip() {
        let text: String = (0..68).map(|i| format!("{}.5 {}.25\n", i, i * 2)).collect();
        let lm = LandmarkFrame::from_pts_text(&text).unwrap();
        assert_eq!(lm.points.len(), 68);
        assert_eq!(lm.points[1], (1.5, 2.25));
        assert!(LandmarkFrame::from_pts_text("1 2\n3 4\n").is_err());
    }

    #[test]
    fn chw_scaling() {
        let mut f = RgbFrame::filled(2, 1, [0, 0, 0]);
        f.set(0, 0, [255, 0, 51]);
        let chw = f.to_chw();
        assert_eq!(chw.len(), 6);
        assert!((chw[0] - 1.0).abs() < 1e-12);
        assert!((chw[4] - 0.2).abs() < 1e-12);
    }
}
