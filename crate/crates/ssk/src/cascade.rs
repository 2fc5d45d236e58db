//! Primary + zoomed-in inference: the primary model's masks localize eye
//! and mouth crops, dedicated sub-models re-segment the crops, and their
//! hard labels replace the corresponding areas of the primary mask.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{classes, localize_crop_boxes, CropBox, CropConfig, MaskFrame, RegionKind, RgbFrame};
use crate::error::{Error, Result};
use crate::models::{logits_to_masks, ModelGraph};
use crate::tensor::Tensor;

/// How a sub-model's classes map into the 5-class space and which global
/// classes the region owns inside its box.
#[derive(Clone, Debug)]
pub struct ClassMapping {
    /// `(sub-model class, global class)` for foreground classes.
    pub foreground: Vec<(u8, u8)>,
    /// Global classes replaced by facial skin when the sub-model says
    /// background.
    pub owned: Vec<u8>,
}

impl ClassMapping {
    pub fn for_region(kind: RegionKind) -> ClassMapping {
        match kind {
            RegionKind::Eyes => ClassMapping {
                foreground: vec![(1, classes::EYES)],
                owned: vec![classes::EYES],
            },
            RegionKind::Mouth => ClassMapping {
                foreground: vec![(1, classes::OUTER_MOUTH), (2, classes::INNER_MOUTH)],
                owned: vec![classes::OUTER_MOUTH, classes::INNER_MOUTH],
            },
        }
    }

    fn map_foreground(&self, sub: u8) -> Option<u8> {
        self.foreground.iter().find(|(s, _)| *s == sub).map(|(_, g)| *g)
    }

    /// Projects a 5-class mask into the sub-model's class space.
    pub fn project(&self, mask: &MaskFrame) -> MaskFrame {
        let mut out = MaskFrame::filled(mask.width(), mask.height(), 0);
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                let g = mask.get(x, y);
                if let Some((s, _)) = self.foreground.iter().find(|(_, gl)| *gl == g) {
                    out.set(x, y, *s);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    /// Eye sub-model input (width, height).
    #[serde(default = "default_eye_input")]
    pub eye_input: (usize, usize),
    #[serde(default = "default_mouth_input")]
    pub mouth_input: (usize, usize),
    /// Box expansion; jitter is always zero at inference.
    #[serde(default = "crate::data::default_crop_margin")]
    pub margin: f64,
}

fn default_eye_input() -> (usize, usize) {
    (64, 32)
}

fn default_mouth_input() -> (usize, usize) {
    (48, 48)
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            eye_input: default_eye_input(),
            mouth_input: default_mouth_input(),
            margin: crate::data::default_crop_margin(),
        }
    }
}

/// The primary 5-class model plus optional 2-class eye and 3-class mouth
/// models. Missing sub-models degrade the cascade to primary-only output.
pub struct CascadeBundle {
    pub primary: ModelGraph,
    pub eyes: Option<ModelGraph>,
    pub mouth: Option<ModelGraph>,
    pub cfg: CascadeConfig,
}

impl CascadeBundle {
    pub fn new(primary: ModelGraph, eyes: Option<ModelGraph>, mouth: Option<ModelGraph>, cfg: CascadeConfig) -> Result<Self> {
        if primary.classes != classes::COUNT {
            return Err(Error::arg(
                "CascadeBundle",
                format!("primary model has {} classes, expected {}", primary.classes, classes::COUNT),
            ));
        }
        if let Some(m) = &eyes {
            if m.classes != 2 {
                return Err(Error::arg("CascadeBundle", format!("eye model has {} classes, expected 2", m.classes)));
            }
        }
        if let Some(m) = &mouth {
            if m.classes != 3 {
                return Err(Error::arg("CascadeBundle", format!("mouth model has {} classes, expected 3", m.classes)));
            }
        }
        Ok(CascadeBundle { primary, eyes, mouth, cfg })
    }
}

/// Replaces the box interior of `primary` with the sub-model's decision:
/// foreground pixels take the mapped global label, background pixels keep
/// the primary label unless it is owned by this region, in which case
/// facial skin fills the vacated area. Outside the box nothing changes.
pub fn integrate_masks(
    primary: &MaskFrame,
    region_pred: &MaskFrame,
    bbox: &CropBox,
    mapping: &ClassMapping,
) -> MaskFrame {
    let mut out = primary.clone();
    // Clamp once more in case the box came from a different frame size.
    let x1 = (bbox.x + bbox.w).min(primary.width());
    let y1 = (bbox.y + bbox.h).min(primary.height());
    if bbox.x >= x1 || bbox.y >= y1 {
        return out;
    }
    for y in bbox.y..y1 {
        for x in bbox.x..x1 {
            let sub = region_pred.get(x - bbox.x, y - bbox.y);
            match mapping.map_foreground(sub) {
                Some(global) => out.set(x, y, global),
                None => {
                    if mapping.owned.contains(&out.get(x, y)) {
                        out.set(x, y, classes::SKIN);
                    }
                }
            }
        }
    }
    out
}

fn frames_to_batch(frames: &[RgbFrame]) -> Result<Tensor> {
    let (w, h) = (frames[0].width, frames[0].height);
    let chw = 3 * h * w;
    let mut data = vec![0.0; frames.len() * chw];
    for (i, f) in frames.iter().enumerate() {
        if f.width != w || f.height != h {
            return Err(Error::shape(
                "run_cascade",
                format!("frame {i} is {}x{}, expected {w}x{h}", f.width, f.height),
            ));
        }
        data[i * chw..(i + 1) * chw].copy_from_slice(&f.to_chw());
    }
    Tensor::new(vec![frames.len(), 3, h, w], data)
}

fn run_sub_model(
    model: &ModelGraph,
    frames: &[RgbFrame],
    bbox: &CropBox,
    input: (usize, usize),
) -> Result<Vec<MaskFrame>> {
    let crops: Vec<RgbFrame> = frames
        .iter()
        .map(|f| f.crop(bbox.x, bbox.y, bbox.w, bbox.h).resize_bilinear(input.0, input.1))
        .collect();
    let batch = frames_to_batch(&crops)?;
    let logits = model.predict(&batch)?;
    let preds = logits_to_masks(&logits)?;
    // Back to box resolution, nearest-neighbour on class indices.
    Ok(preds.into_iter().map(|m| m.resize_nearest(bbox.w, bbox.h)).collect())
}

/// Runs the full pipeline on one clip window. Crop boxes are localized
/// from the primary masks with zero jitter, eyes are integrated before
/// the mouth, and a missing sub-model leaves its region at the primary
/// prediction (with a notice).
pub fn run_cascade(bundle: &CascadeBundle, frames: &[RgbFrame]) -> Result<Vec<MaskFrame>> {
    if frames.is_empty() {
        return Err(Error::arg("run_cascade", "empty clip".to_string()));
    }
    if let Some(t) = bundle.primary.clip_t {
        if frames.len() != t {
            return Err(Error::shape(
                "run_cascade",
                format!("window of {} frames, primary model expects T={}", frames.len(), t),
            ));
        }
    }
    let batch = frames_to_batch(frames)?;
    let logits = bundle.primary.predict(&batch)?;
    let mut masks = logits_to_masks(&logits)?;

    let crop_cfg = CropConfig { margin: bundle.cfg.margin, noise: 0.0 };
    // Noise is zero, so the rng is never consulted; fixed seed regardless.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (kind, model, input) in [
        (RegionKind::Eyes, &bundle.eyes, bundle.cfg.eye_input),
        (RegionKind::Mouth, &bundle.mouth, bundle.cfg.mouth_input),
    ] {
        let Some(model) = model else {
            log::info!("{kind:?} sub-model absent; keeping primary prediction");
            continue;
        };
        let bbox = localize_crop_boxes(&masks, kind, &crop_cfg, &mut rng)?;
        let preds = run_sub_model(model, frames, &bbox, input)?;
        let mapping = ClassMapping::for_region(kind);
        for (mask, pred) in masks.iter_mut().zip(&preds) {
            *mask = integrate_masks(mask, pred, &bbox, &mapping);
        }
    }
    Ok(masks)
}
