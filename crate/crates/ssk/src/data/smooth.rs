//! Gaussian temporal smoothing of per-frame softmax maps: the simple
//! baseline the recurrent model is compared against.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalized Gaussian weights for the in-range slice of a centred window
/// at frame `pos` of a `len`-frame clip. Returns `(first_frame, weights)`.
pub fn gaussian_window_weights(window: usize, sigma: f64, pos: usize, len: usize) -> (usize, Vec<f64>) {
    let r = window as isize / 2;
    let mut first = pos;
    let mut weights = Vec::new();
    for d in -r..=r {
        let t = pos as isize + d;
        if t < 0 || t >= len as isize {
            continue;
        }
        if weights.is_empty() {
            first = t as usize;
        }
        weights.push((-((d * d) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    (first, weights)
}

/// Per-pixel, per-class weighted average of softmax maps over a centred
/// window (truncated and renormalized at clip edges). Input and output
/// are per-frame `[C, H, W]` tensors; argmax is for the caller to take
/// after smoothing.
pub fn temporal_smooth(probs_seq: &[Tensor], window: usize, sigma: f64) -> Result<Vec<Tensor>> {
    if window.is_multiple_of(2) {
        return Err(Error::arg("temporal_smooth", format!("window {window} must be odd")));
    }
    if sigma <= 0.0 {
        return Err(Error::arg("temporal_smooth", format!("sigma {sigma} must be positive")));
    }
    if probs_seq.is_empty() {
        return Err(Error::arg("temporal_smooth", "empty sequence".to_string()));
    }
    let shape = probs_seq[0].shape().to_vec();
    for p in probs_seq {
        if p.shape() != shape {
            return Err(Error::shape(
                "temporal_smooth",
                format!("frame shapes differ: {:?} vs {:?}", shape, p.shape()),
            ));
        }
    }
    let len = probs_seq.len();
    let numel = probs_seq[0].numel();
    let mut out = Vec::with_capacity(len);
    for pos in 0..len {
        let (first, weights) = gaussian_window_weights(window, sigma, pos, len);
        let mut acc = vec![0.0; numel];
        for (k, &w) in weights.iter().enumerate() {
            let frame = probs_seq[first + k].data();
            for (a, v) in acc.iter_mut().zip(frame) {
                *a += w * v;
            }
        }
        out.push(Tensor::new(shape.clone(), acc)?);
    }
    Ok(out)
}
