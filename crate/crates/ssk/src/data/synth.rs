//! Deterministic synthetic face-like video clips: a drifting, rotating
//! ellipse layout (skin, two eyes, outer/inner mouth) rendered with
//! photometric noise, lighting drift, and periodic occluder bars. Masks
//! come from the same landmark sets through the rasterizer, so occlusion
//! corrupts only the images, never the annotation.

#![allow(clippy::needless_range_loop)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    landmarks_to_mask, ClipEntry, LandmarkFrame, MaskFrame, RgbFrame, SequenceManifest, Split,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_clips: usize,
    pub val_clips: usize,
    pub test_clips: usize,
    pub frames_per_clip: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// Clips sharing one synthetic identity (parameter bundle).
    #[serde(default = "default_clips_per_subject")]
    pub clips_per_subject: usize,
    /// Occluder bars hit frames with `t % period in [phase, phase+len)`;
    /// period 0 disables them.
    #[serde(default = "default_occ_period")]
    pub occluder_period: usize,
    #[serde(default = "default_occ_phase")]
    pub occluder_phase: usize,
    #[serde(default = "default_occ_len")]
    pub occluder_len: usize,
    /// Photometric noise amplitude as a fraction of full scale.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_true")]
    pub write_landmarks: bool,
}

fn default_fps() -> f64 {
    30.0
}
fn default_clips_per_subject() -> usize {
    4
}
fn default_occ_period() -> usize {
    5
}
fn default_occ_phase() -> usize {
    2
}
fn default_occ_len() -> usize {
    2
}
fn default_noise() -> f64 {
    0.04
}
fn default_true() -> bool {
    true
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            train_clips: 60,
            val_clips: 8,
            test_clips: 12,
            frames_per_clip: 10,
            width: 64,
            height: 64,
            fps: default_fps(),
            clips_per_subject: default_clips_per_subject(),
            occluder_period: default_occ_period(),
            occluder_phase: default_occ_phase(),
            occluder_len: default_occ_len(),
            noise: default_noise(),
            write_landmarks: default_true(),
        }
    }
}

pub struct SynthDataset {
    pub root: PathBuf,
    pub train: SequenceManifest,
    pub val: SequenceManifest,
    pub test: SequenceManifest,
}

impl SynthDataset {
    pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
        root.join(format!("{split}.json"))
    }

    pub fn manifest(&self, split: Split) -> &SequenceManifest {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// One synthetic identity: face geometry and palette.
struct Subject {
    id: String,
    center: (f64, f64),
    face: (f64, f64),
    eye_off: (f64, f64),
    eye: (f64, f64),
    mouth_off: f64,
    mouth: (f64, f64),
    skin: [f64; 3],
    eye_color: [f64; 3],
    outer_color: [f64; 3],
    inner_color: [f64; 3],
    bg: [f64; 3],
    bg_slope: f64,
}

impl Subject {
    fn sample(id: String, w: f64, h: f64, rng: &mut ChaCha8Rng) -> Self {
        let jitter = |rng: &mut ChaCha8Rng, base: [f64; 3], amp: f64| {
            [
                base[0] + rng.gen_range(-amp..amp),
                base[1] + rng.gen_range(-amp..amp),
                base[2] + rng.gen_range(-amp..amp),
            ]
        };
        Subject {
            id,
            center: (
                w * (0.5 + rng.gen_range(-0.05..0.05)),
                h * (0.5 + rng.gen_range(-0.03..0.05)),
            ),
            face: (w * rng.gen_range(0.34..0.40), h * rng.gen_range(0.38..0.46)),
            eye_off: (rng.gen_range(0.44..0.52), rng.gen_range(-0.36..-0.28)),
            eye: (rng.gen_range(0.38..0.46), rng.gen_range(0.24..0.30)),
            mouth_off: rng.gen_range(0.46..0.56),
            mouth: (rng.gen_range(0.50..0.58), rng.gen_range(0.26..0.32)),
            skin: jitter(rng, [205.0, 165.0, 135.0], 25.0),
            eye_color: jitter(rng, [55.0, 60.0, 80.0], 15.0),
            outer_color: jitter(rng, [175.0, 70.0, 80.0], 20.0),
            inner_color: jitter(rng, [95.0, 35.0, 40.0], 15.0),
            bg: jitter(rng, [120.0, 125.0, 135.0], 30.0),
            bg_slope: rng.gen_range(-40.0..40.0),
        }
    }
}

/// Per-clip motion bundle.
struct Motion {
    amp: (f64, f64),
    freq: (f64, f64),
    phase: (f64, f64),
    theta0: f64,
    theta_speed: f64,
    open_freq: f64,
    open_phase: f64,
    light_freq: f64,
    light_phase: f64,
}

impl Motion {
    fn sample(w: f64, h: f64, rng: &mut ChaCha8Rng) -> Self {
        Motion {
            amp: (w * rng.gen_range(0.02..0.05), h * rng.gen_range(0.02..0.05)),
            freq: (rng.gen_range(0.2..0.7), rng.gen_range(0.2..0.7)),
            phase: (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)),
            theta0: rng.gen_range(-0.15..0.15),
            theta_speed: rng.gen_range(-0.03..0.03),
            open_freq: rng.gen_range(0.4..0.9),
            open_phase: rng.gen_range(0.0..2.0 * PI),
            light_freq: rng.gen_range(0.3..0.8),
            light_phase: rng.gen_range(0.0..2.0 * PI),
        }
    }
}

/// 68 landmarks for one frame of a subject under a motion state.
fn layout_landmarks(s: &Subject, m: &Motion, t: usize) -> LandmarkFrame {
    let tf = t as f64;
    let cx = s.center.0 + m.amp.0 * (m.freq.0 * tf + m.phase.0).sin();
    let cy = s.center.1 + m.amp.1 * (m.freq.1 * tf + m.phase.1).sin();
    let theta = m.theta0 + m.theta_speed * tf;
    let (sin_t, cos_t) = theta.sin_cos();
    let place = |p: (f64, f64)| -> (f64, f64) {
        (cx + p.0 * cos_t - p.1 * sin_t, cy + p.0 * sin_t + p.1 * cos_t)
    };

    let (a, b) = s.face;
    let (ea, eb) = (s.eye.0 * a, s.eye.1 * b);
    let re = (-s.eye_off.0 * a, s.eye_off.1 * b);
    let le = (s.eye_off.0 * a, s.eye_off.1 * b);
    let mc = (0.0, s.mouth_off * b);
    let (ma, mb) = (s.mouth.0 * a, s.mouth.1 * b);
    let open = 0.3 * (1.0 + (m.open_freq * tf + m.open_phase).sin());
    let (ia, ib) = (0.62 * ma, open * mb);

    let mut pts = vec![(0.0, 0.0); 68];
    // Jaw: left ear over the chin to the right ear.
    for i in 0..=16 {
        let alpha = PI - i as f64 * PI / 16.0;
        pts[i] = place((a * alpha.cos(), b * alpha.sin()));
    }
    // Brows above each eye, bowed slightly upward.
    for k in 0..5 {
        let frac = k as f64 / 4.0;
        let bow = 0.6 * eb * (PI * frac).sin();
        let y = re.1 - 2.2 * eb - bow;
        pts[17 + k] = place((re.0 + (frac * 2.8 - 1.4) * ea, y));
        pts[22 + k] = place((le.0 + (frac * 2.8 - 1.4) * ea, y));
    }
    // Nose: vertical line (carries no mask region).
    for k in 0..9 {
        pts[27 + k] = place((0.0, -0.15 * b + k as f64 * 0.05 * b));
    }
    // Eyes: hexagons with corner points first and fourth.
    let hex = |c: (f64, f64)| {
        [
            (c.0 - ea, c.1),
            (c.0 - ea / 3.0, c.1 - eb),
            (c.0 + ea / 3.0, c.1 - eb),
            (c.0 + ea, c.1),
            (c.0 + ea / 3.0, c.1 + eb),
            (c.0 - ea / 3.0, c.1 + eb),
        ]
    };
    for (k, p) in hex(re).into_iter().enumerate() {
        pts[36 + k] = place(p);
    }
    for (k, p) in hex(le).into_iter().enumerate() {
        pts[42 + k] = place(p);
    }
    // Outer mouth: 12 points around an ellipse, corners at 48 and 54.
    pts[48] = place((mc.0 - ma, mc.1));
    for k in 1..=5 {
        let beta = PI - k as f64 * PI / 6.0;
        pts[48 + k] = place((mc.0 + ma * beta.cos(), mc.1 - mb * beta.sin()));
    }
    pts[54] = place((mc.0 + ma, mc.1));
    for k in 1..=5 {
        let beta = k as f64 * PI / 6.0;
        pts[54 + k] = place((mc.0 + ma * beta.cos(), mc.1 + mb * beta.sin()));
    }
    // Inner mouth: 8 points, corners at 60 and 64; height follows the
    // mouth-openness cycle and periodically collapses shut.
    pts[60] = place((mc.0 - ia, mc.1));
    for k in 1..=3 {
        let beta = PI - k as f64 * PI / 4.0;
        pts[60 + k] = place((mc.0 + ia * beta.cos(), mc.1 - ib * beta.sin()));
    }
    pts[64] = place((mc.0 + ia, mc.1));
    for k in 1..=3 {
        let beta = k as f64 * PI / 4.0;
        pts[64 + k] = place((mc.0 + ia * beta.cos(), mc.1 + ib * beta.sin()));
    }
    LandmarkFrame::new(pts).expect("synthetic landmarks are finite")
}

fn render_frame(
    s: &Subject,
    mask: &MaskFrame,
    brightness: f64,
    noise_amp: f64,
    occluded: bool,
    rng: &mut ChaCha8Rng,
) -> RgbFrame {
    let (w, h) = (mask.width(), mask.height());
    let mut frame = RgbFrame::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        let bg_shift = s.bg_slope * (y as f64 / h as f64 - 0.5);
        for x in 0..w {
            let base = match mask.get(x, y) {
                1 => s.skin,
                2 => s.eye_color,
                3 => s.outer_color,
                4 => s.inner_color,
                _ => [s.bg[0] + bg_shift, s.bg[1] + bg_shift, s.bg[2] + bg_shift],
            };
            let mut rgb = [0u8; 3];
            for ch in 0..3 {
                let n = rng.gen_range(-noise_amp..=noise_amp);
                rgb[ch] = (base[ch] * brightness + n).clamp(0.0, 255.0) as u8;
            }
            frame.set(x, y, rgb);
        }
    }
    if occluded {
        let bars = rng.gen_range(2..=3);
        for _ in 0..bars {
            let gray = rng.gen_range(90..150u8);
            let vertical = rng.gen_bool(0.5);
            if vertical {
                let bw = (w as f64 * rng.gen_range(0.18..0.35)) as usize;
                let x0 = rng.gen_range(0..w.saturating_sub(bw).max(1));
                for y in 0..h {
                    for x in x0..(x0 + bw).min(w) {
                        frame.set(x, y, [gray, gray, gray]);
                    }
                }
            } else {
                let bh = (h as f64 * rng.gen_range(0.18..0.35)) as usize;
                let y0 = rng.gen_range(0..h.saturating_sub(bh).max(1));
                for y in y0..(y0 + bh).min(h) {
                    for x in 0..w {
                        frame.set(x, y, [gray, gray, gray]);
                    }
                }
            }
        }
    }
    frame
}

fn occluded_at(cfg: &SynthConfig, t: usize) -> bool {
    if cfg.occluder_period == 0 {
        return false;
    }
    let m = t % cfg.occluder_period;
    m >= cfg.occluder_phase && m < cfg.occluder_phase + cfg.occluder_len
}

/// Generates the dataset under `out_dir` (frames/, masks/ and one manifest
/// per split) and returns the manifests. Identical seeds produce identical
/// files.
pub fn synth_video_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthDataset> {
    if cfg.width < 32 || cfg.height < 32 {
        return Err(Error::arg("synth_video_generate", format!("size {}x{} below 32x32", cfg.width, cfg.height)));
    }
    if cfg.frames_per_clip == 0 || cfg.clips_per_subject == 0 {
        return Err(Error::arg("synth_video_generate", "frames_per_clip and clips_per_subject must be >= 1".to_string()));
    }
    std::fs::create_dir_all(out_dir)?;
    // Geometry (subjects, motion) and rendering (noise, occluders) draw
    // from separate streams so occluder settings cannot shift the layouts.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (wf, hf) = (cfg.width as f64, cfg.height as f64);

    let mut subject_counter = 0usize;
    let mut clip_counter = 0usize;
    let mut manifests = Vec::new();
    for (split, count) in [
        (Split::Train, cfg.train_clips),
        (Split::Val, cfg.val_clips),
        (Split::Test, cfg.test_clips),
    ] {
        let mut clips = Vec::with_capacity(count);
        let mut remaining = count;
        while remaining > 0 {
            let subject = Subject::sample(format!("subj{:03}", subject_counter), wf, hf, &mut rng);
            subject_counter += 1;
            let clips_here = remaining.min(cfg.clips_per_subject);
            for _ in 0..clips_here {
                let clip_id = format!("clip{:04}", clip_counter);
                clip_counter += 1;
                let motion = Motion::sample(wf, hf, &mut rng);
                let mut render_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                render_rng.set_stream(1 + clip_counter as u64);

                let frames_rel = Path::new("frames").join(&clip_id);
                let masks_rel = Path::new("masks").join(&clip_id);
                std::fs::create_dir_all(out_dir.join(&frames_rel))?;
                std::fs::create_dir_all(out_dir.join(&masks_rel))?;
                let lm_dir = out_dir.join("landmarks").join(&clip_id);
                if cfg.write_landmarks {
                    std::fs::create_dir_all(&lm_dir)?;
                }

                let mut frame_paths = Vec::with_capacity(cfg.frames_per_clip);
                let mut mask_paths = Vec::with_capacity(cfg.frames_per_clip);
                for t in 0..cfg.frames_per_clip {
                    let lm = layout_landmarks(&subject, &motion, t);
                    let mask = landmarks_to_mask(&lm, cfg.width, cfg.height)?;
                    let brightness = 1.0 + 0.12 * (motion.light_freq * t as f64 + motion.light_phase).sin();
                    let frame = render_frame(
                        &subject,
                        &mask,
                        brightness,
                        cfg.noise * 255.0,
                        occluded_at(cfg, t),
                        &mut render_rng,
                    );
                    let frame_rel = frames_rel.join(format!("f{:03}.png", t));
                    let mask_rel = masks_rel.join(format!("f{:03}.png", t));
                    frame.save_png(&out_dir.join(&frame_rel))?;
                    mask.save_png(&out_dir.join(&mask_rel))?;
                    if cfg.write_landmarks {
                        let text: String = lm
                            .points
                            .iter()
                            .map(|(x, y)| format!("{x:.4} {y:.4}\n"))
                            .collect();
                        std::fs::write(lm_dir.join(format!("f{:03}.pts", t)), text)?;
                    }
                    frame_paths.push(frame_rel);
                    mask_paths.push(mask_rel);
                }
                clips.push(ClipEntry {
                    id: clip_id,
                    subject: subject.id.clone(),
                    frames: frame_paths,
                    masks: mask_paths,
                    fps: cfg.fps,
                    width: cfg.width,
                    height: cfg.height,
                });
            }
            remaining -= clips_here;
        }
        let manifest = SequenceManifest::new(split, clips);
        manifest.save(&SynthDataset::manifest_path(out_dir, split))?;
        manifests.push(manifest.resolved(out_dir));
    }
    let mut it = manifests.into_iter();
    Ok(SynthDataset {
        root: out_dir.to_path_buf(),
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}
