//! Landmark-to-mask conversion: spline each region contour into a dense
//! polygon and fill it with an even-odd scanline pass.

use std::sync::OnceLock;

use serde::Deserialize;

use crate::data::spline::closed_cubic_spline;
use crate::data::{classes, LandmarkFrame, MaskFrame};
use crate::error::{Error, Result};

const SAMPLES_PER_SEGMENT: usize = 8;

/// The landmark-index-to-region convention, loaded from the bundled data
/// file. The paper-side contour segmentation is underspecified, so this
/// layout is a documented convention, not a claim.
#[derive(Clone, Debug, Deserialize)]
pub struct RegionLayout {
    pub version: u32,
    #[serde(default)]
    pub note: String,
    pub regions: Vec<RegionSpec>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub class: u8,
    pub polygons: Vec<PolygonSpec>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct PolygonSpec {
    pub indices: Vec<usize>,
    pub corners: Vec<usize>,
}

static LAYOUT: OnceLock<RegionLayout> = OnceLock::new();

pub fn region_layout() -> &'static RegionLayout {
    LAYOUT.get_or_init(|| {
        serde_json::from_str(include_str!("../../assets/landmark_regions.json"))
            .expect("bundled landmark_regions.json is valid")
    })
}

/// Even-odd scanline fill of a closed polygon, writing `class` into the
/// mask. Pixels are tested at their centres.
pub fn fill_polygon_even_odd(polygon: &[(f64, f64)], mask: &mut MaskFrame, class: u8) {
    if polygon.len() < 3 {
        return;
    }
    let height = mask.height();
    let width = mask.width();
    let mut crossings: Vec<f64> = Vec::new();
    for y in 0..height {
        let yc = y as f64 + 0.5;
        crossings.clear();
        for e in 0..polygon.len() - 1 {
            let (x1, y1) = polygon[e];
            let (x2, y2) = polygon[e + 1];
            if (y1 <= yc && yc < y2) || (y2 <= yc && yc < y1) {
                crossings.push(x1 + (yc - y1) * (x2 - x1) / (y2 - y1));
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in crossings.chunks_exact(2) {
            // Pixel centres in [x0, x1).
            let from = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let to = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
            for x in from..to {
                mask.set(x, y, class);
            }
        }
    }
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let mut acc = 0.0;
    for i in 0..poly.len().saturating_sub(1) {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[i + 1];
        acc += x1 * y2 - x2 * y1;
    }
    acc.abs() / 2.0
}

/// Rasterizes the 68-point annotation into the 5-class mask. Paint order
/// (background, skin, outer mouth, inner mouth, eyes) comes from the
/// layout file; degenerate contours (zero area, e.g. a closed mouth) are
/// skipped with a warning.
pub fn landmarks_to_mask(lm: &LandmarkFrame, width: usize, height: usize) -> Result<MaskFrame> {
    if width == 0 || height == 0 {
        return Err(Error::arg("landmarks_to_mask", format!("bad frame size {width}x{height}")));
    }
    let lm = lm.clamped(width, height);
    let mut mask = MaskFrame::filled(width, height, classes::BACKGROUND);
    for region in &region_layout().regions {
        for poly_spec in &region.polygons {
            let pts: Vec<(f64, f64)> = poly_spec.indices.iter().map(|&i| lm.points[i]).collect();
            let polygon = match closed_cubic_spline(&pts, &poly_spec.corners, SAMPLES_PER_SEGMENT) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("region {}: contour skipped ({e})", region.name);
                    continue;
                }
            };
            if polygon_area(&polygon) < 0.5 {
                log::warn!("region {}: zero-area contour skipped", region.name);
                continue;
            }
            fill_polygon_even_odd(&polygon, &mut mask, region.class);
        }
    }
    Ok(mask)
}
