//! Zoomed-in region sub-datasets: crop eye or mouth windows out of a
//! parent dataset using its annotation masks, with jittered boxes fixed
//! per T-frame window, and remap the labels into the region's own class
//! space (eyes: background/eyes; mouth: background/outer/inner).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cascade::ClassMapping;
use crate::data::{
    localize_crop_boxes, ClipEntry, CropConfig, MaskFrame, RegionKind, RgbFrame, SequenceManifest,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SubdatasetConfig {
    pub kind: RegionKind,
    /// Target (width, height) of the cropped frames.
    pub input: (usize, usize),
    pub t: usize,
    pub crop: CropConfig,
    pub seed: u64,
}

/// Builds the region sub-dataset under `out_dir` and writes a manifest
/// named after the parent split. Windows are the same non-overlapping
/// T-frame windows the batcher uses; each keeps one fixed crop box.
pub fn build_region_subdataset(
    parent: &SequenceManifest,
    cfg: &SubdatasetConfig,
    out_dir: &Path,
) -> Result<SequenceManifest> {
    if cfg.t == 0 {
        return Err(Error::arg("build_region_subdataset", "T must be >= 1".to_string()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mapping = ClassMapping::for_region(cfg.kind);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (tw, th) = cfg.input;

    let mut clips = Vec::new();
    for clip in &parent.clips {
        let windows = clip.frames.len() / cfg.t;
        if windows == 0 {
            continue;
        }
        let frames_rel = Path::new("frames").join(&clip.id);
        let masks_rel = Path::new("masks").join(&clip.id);
        std::fs::create_dir_all(out_dir.join(&frames_rel))?;
        std::fs::create_dir_all(out_dir.join(&masks_rel))?;
        let mut frame_paths = Vec::new();
        let mut mask_paths = Vec::new();
        for wi in 0..windows {
            let start = wi * cfg.t;
            let gt_masks: Vec<MaskFrame> = clip.masks[start..start + cfg.t]
                .iter()
                .map(|p| MaskFrame::load_png(p))
                .collect::<Result<_>>()?;
            let bbox = localize_crop_boxes(&gt_masks, cfg.kind, &cfg.crop, &mut rng)?;
            for (i, gt) in gt_masks.iter().enumerate() {
                let frame = RgbFrame::load_png(&clip.frames[start + i])?;
                let crop = frame.crop(bbox.x, bbox.y, bbox.w, bbox.h).resize_bilinear(tw, th);
                // Crop the annotation, remap to region classes, then resize.
                let mut gt_crop = MaskFrame::filled(bbox.w, bbox.h, 0);
                for y in 0..bbox.h {
                    for x in 0..bbox.w {
                        gt_crop.set(x, y, gt.get(bbox.x + x, bbox.y + y));
                    }
                }
                let remapped = mapping.project(&gt_crop).resize_nearest(tw, th);

                let frame_rel = frames_rel.join(format!("f{:03}.png", start + i));
                let mask_rel = masks_rel.join(format!("f{:03}.png", start + i));
                crop.save_png(&out_dir.join(&frame_rel))?;
                remapped.save_png(&out_dir.join(&mask_rel))?;
                frame_paths.push(frame_rel);
                mask_paths.push(mask_rel);
            }
        }
        clips.push(ClipEntry {
            id: clip.id.clone(),
            subject: clip.subject.clone(),
            frames: frame_paths,
            masks: mask_paths,
            fps: clip.fps,
            width: tw,
            height: th,
        });
    }
    let manifest = SequenceManifest::new(parent.split, clips);
    manifest.save(&out_dir.join(format!("{}.json", parent.split)))?;
    Ok(manifest.resolved(out_dir))
}
