//! Window-preserving sequence batching: batches hold N whole T-frame
//! windows; shuffling permutes windows, never the frames inside one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{MaskFrame, RgbFrame, SequenceManifest};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct BatchConfig {
    /// Frames per window.
    pub t: usize,
    /// Windows per batch.
    pub n: usize,
    pub shuffle: bool,
    pub seed: u64,
}

/// One training batch of `windows.len() * T` consecutive frames.
pub struct Batch {
    /// `[N*T, 3, H, W]`, channel values in `[0, 1]`.
    pub images: Tensor,
    /// Per-pixel class indices, frame-major then row-major; exactly the
    /// sample order `flatten_samples` produces.
    pub labels: Vec<u8>,
    /// `(clip id, start frame)` per window.
    pub windows: Vec<(String, usize)>,
    pub height: usize,
    pub width: usize,
}

/// Iterator over batches; PNGs are loaded lazily per batch.
pub struct BatchIter<'a> {
    manifest: &'a SequenceManifest,
    cfg: BatchConfig,
    /// (clip index, start frame) per window, in emission order.
    windows: Vec<(usize, usize)>,
    cursor: usize,
}

/// Splits every clip into consecutive non-overlapping T-frame windows
/// (trailing frames dropped with a warning), shuffles the windows when
/// asked, and groups them N per batch.
pub fn batch_sequences<'a>(manifest: &'a SequenceManifest, cfg: &BatchConfig) -> Result<BatchIter<'a>> {
    if cfg.t == 0 || cfg.n == 0 {
        return Err(Error::arg("batch_sequences", "T and N must be >= 1".to_string()));
    }
    let mut windows = Vec::new();
    for (ci, clip) in manifest.clips.iter().enumerate() {
        let full = clip.frames.len() / cfg.t;
        if clip.frames.len() % cfg.t != 0 {
            log::warn!(
                "clip {}: dropping {} trailing frame(s) not filling a {}-frame window",
                clip.id,
                clip.frames.len() % cfg.t,
                cfg.t
            );
        }
        for w in 0..full {
            windows.push((ci, w * cfg.t));
        }
    }
    if cfg.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        windows.shuffle(&mut rng);
    }
    Ok(BatchIter { manifest, cfg: cfg.clone(), windows, cursor: 0 })
}

impl BatchIter<'_> {
    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    pub fn batch_count(&self) -> usize {
        self.windows.len().div_ceil(self.cfg.n)
    }

    fn load_batch(&self, slots: &[(usize, usize)]) -> Result<Batch> {
        let first_clip = &self.manifest.clips[slots[0].0];
        let (w, h) = (first_clip.width, first_clip.height);
        let hw = w * h;
        let frames_total = slots.len() * self.cfg.t;
        let mut images = vec![0.0f64; frames_total * 3 * hw];
        let mut labels = vec![0u8; frames_total * hw];
        let mut windows = Vec::with_capacity(slots.len());

        let mut frame_idx = 0;
        for &(ci, start) in slots {
            let clip = &self.manifest.clips[ci];
            if clip.width != w || clip.height != h {
                return Err(Error::shape(
                    "batch_sequences",
                    format!("clip {} is {}x{}, batch is {}x{}", clip.id, clip.width, clip.height, w, h),
                ));
            }
            windows.push((clip.id.clone(), start));
            for t in 0..self.cfg.t {
                let frame = RgbFrame::load_png(&clip.frames[start + t])?;
                if frame.width != w || frame.height != h {
                    return Err(Error::shape(
                        "batch_sequences",
                        format!("frame {:?} is {}x{}", clip.frames[start + t], frame.width, frame.height),
                    ));
                }
                let chw = frame.to_chw();
                images[frame_idx * 3 * hw..(frame_idx + 1) * 3 * hw].copy_from_slice(&chw);
                let mask = MaskFrame::load_png(&clip.masks[start + t])?;
                labels[frame_idx * hw..(frame_idx + 1) * hw].copy_from_slice(mask.data());
                frame_idx += 1;
            }
        }
        Ok(Batch {
            images: Tensor::new(vec![frames_total, 3, h, w], images)?,
            labels,
            windows,
            height: h,
            width: w,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.windows.len() {
            return None;
        }
        let end = (self.cursor + self.cfg.n).min(self.windows.len());
        let slots = self.windows[self.cursor..end].to_vec();
        self.cursor = end;
        Some(self.load_batch(&slots))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_video_generate, SynthConfig};

    fn dataset(frames_per_clip: usize) -> (tempfile::TempDir, crate::data::SynthDataset) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            seed: 2,
            train_clips: 3,
            val_clips: 1,
            test_clips: 1,
            frames_per_clip,
            width: 48,
            height: 48,
            clips_per_subject: 2,
            write_landmarks: false,
            ..SynthConfig::default()
        };
        let ds = synth_video_generate(&cfg, dir.path()).unwrap();
        (dir, ds)
    }

    #[test]
    fn batches_hold_whole_windows_in_order() {
        let (_dir, ds) = dataset(10);
        let cfg = BatchConfig { t: 5, n: 2, shuffle: false, seed: 0 };
        let iter = batch_sequences(&ds.train, &cfg).unwrap();
        assert_eq!(iter.window_count(), 3 * 2);
        assert_eq!(iter.batch_count(), 3);
        let batches: Vec<Batch> = iter.map(|b| b.unwrap()).collect();
        assert_eq!(batches.len(), 3);
        let first = &batches[0];
        assert_eq!(first.images.shape(), &[10, 3, 48, 48]);
        assert_eq!(first.labels.len(), 10 * 48 * 48);
        // Unshuffled: first two windows are clip0 frames 0-4 and 5-9.
        assert_eq!(first.windows[0], (ds.train.clips[0].id.clone(), 0));
        assert_eq!(first.windows[1], (ds.train.clips[0].id.clone(), 5));
    }

    #[test]
    fn shuffle_permutes_windows_never_frames() {
        let (_dir, ds) = dataset(10);
        let cfg = BatchConfig { t: 5, n: 2, shuffle: true, seed: 9 };
        let plain: Vec<(String, usize)> = batch_sequences(
            &ds.train,
            &BatchConfig { shuffle: false, ..cfg.clone() },
        )
        .unwrap()
        .flat_map(|b| b.unwrap().windows)
        .collect();
        let shuffled: Vec<(String, usize)> =
            batch_sequences(&ds.train, &cfg).unwrap().flat_map(|b| b.unwrap().windows).collect();
        assert_ne!(plain, shuffled);
        let sort = |mut v: Vec<(String, usize)>| {
            v.sort();
            v
        };
        assert_eq!(sort(plain), sort(shuffled.clone()));
        // Window starts stay aligned to T.
        for (_, start) in &shuffled {
            assert_eq!(start % 5, 0);
        }
    }

    #[test]
    fn trailing_frames_are_dropped() {
        let (_dir, ds) = dataset(7);
        let cfg = BatchConfig { t: 5, n: 2, shuffle: false, seed: 0 };
        let iter = batch_sequences(&ds.train, &cfg).unwrap();
        // 7 frames -> one 5-frame window per clip.
        assert_eq!(iter.window_count(), 3);
    }

    #[test]
    fn t_one_is_plain_frame_batching() {
        let (_dir, ds) = dataset(4);
        let cfg = BatchConfig { t: 1, n: 3, shuffle: false, seed: 0 };
        let iter = batch_sequences(&ds.val, &cfg).unwrap();
        assert_eq!(iter.window_count(), 4);
        let first = iter.map(|b| b.unwrap()).next().unwrap();
        assert_eq!(first.images.shape(), &[3, 3, 48, 48]);
    }

    #[test]
    fn epoch_batch_count_matches_arithmetic() {
        // 3 clips x 10 frames, T=5, N=2 -> 6 windows -> 3 batches.
        let (_dir, ds) = dataset(10);
        let cfg = BatchConfig { t: 5, n: 2, shuffle: true, seed: 1 };
        assert_eq!(batch_sequences(&ds.train, &cfg).unwrap().count(), 3);
    }
}
