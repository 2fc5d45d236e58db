//! Experiment drivers: the two-step training protocol (baseline FCN with
//! cross-entropy, then conversion to ConvLSTM-FCN trained with the
//! configured loss), evaluation with report emitters, cascade evaluation,
//! and the gradient-check suite.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::cascade::{run_cascade, CascadeBundle};
use crate::config::{ExperimentConfig, Retain};
use crate::convlstm::{convlstm_step, ConvLstmCell, ConvLstmConfig};
use crate::data::{
    batch_sequences, classes, temporal_smooth, BatchConfig, MaskFrame, RgbFrame, SequenceManifest,
    SynthDataset, Split,
};
use crate::error::{Error, Result};
use crate::losses::{
    compute_soft_region_stats, cross_entropy, iou_loss_over_classes, one_hot, seg_loss, LossConfig,
    LossKind,
};
use crate::metrics::{
    grouped_significance, temporal_improvement_profile, ConfusionMatrix, IouSummary, Significance,
    SubjectStats,
};
use crate::models::{
    build_mini_fcn, convert_to_convlstm_fcn, logits_to_masks, ConvertOptions, ModelGraph,
    DEFAULT_WARM_SCALE,
};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::ops;
use crate::tensor::{finite_diff_check, GraphTape, Tensor};

/// Builds the configured scalar objective over `[N,C,H,W]` scores and
/// per-pixel labels (one per sample, frame-major).
pub fn segmentation_objective(
    tape: &mut GraphTape,
    logits: &Tensor,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<Tensor> {
    let (n, c, h, w) = logits.dims4()?;
    if labels.len() != n * h * w {
        return Err(Error::shape(
            "segmentation_objective",
            format!("{} labels for {} pixel samples", labels.len(), n * h * w),
        ));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let scores = ops::flatten_samples(tape, logits)?;
    match cfg.kind {
        LossKind::CrossEntropy => cross_entropy(tape, &scores, &labels),
        LossKind::Iou => {
            let probs = ops::softmax_channels(tape, logits)?;
            let rows = ops::flatten_samples(tape, &probs)?;
            let onehot = one_hot(&labels, c)?;
            let class_list: Vec<usize> =
                if cfg.include_background { (0..c).collect() } else { (1..c).collect() };
            iou_loss_over_classes(tape, &rows, &onehot, &class_list)
        }
        LossKind::Segmentation => {
            let probs = ops::softmax_channels(tape, logits)?;
            let rows = ops::flatten_samples(tape, &probs)?;
            let onehot = one_hot(&labels, c)?;
            // Weights are recomputed from the current batch and detached:
            // only the raw scores carry gradient.
            let stats = compute_soft_region_stats(&rows, &onehot)?;
            seg_loss(tape, &scores, &labels, &stats, cfg)
        }
    }
}

/// Per-frame softmax maps `[C,H,W]` from `[N,C,H,W]` scores.
pub fn logits_to_prob_frames(logits: &Tensor) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = logits.dims4()?;
    let mut tape = GraphTape::new();
    let probs = ops::softmax_channels(&mut tape, logits)?;
    let chw = c * h * w;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(Tensor::new(vec![c, h, w], probs.data()[i * chw..(i + 1) * chw].to_vec())?);
    }
    Ok(out)
}

fn masks_from_probs(prob_frames: &[Tensor], width: usize, height: usize) -> Result<Vec<MaskFrame>> {
    let mut out = Vec::with_capacity(prob_frames.len());
    for frame in prob_frames {
        let (c, h, w) = match frame.shape() {
            [c, h, w] => (*c, *h, *w),
            other => return Err(Error::shape("masks_from_probs", format!("{other:?}"))),
        };
        let hw = h * w;
        let mut mask = vec![0u8; hw];
        for (p, slot) in mask.iter_mut().enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut best_c = 0u8;
            for ch in 0..c {
                let v = frame.data()[ch * hw + p];
                if v > best {
                    best = v;
                    best_c = ch as u8;
                }
            }
            *slot = best_c;
        }
        let mask = MaskFrame::new(w, h, mask)?;
        out.push(if w == width && h == height { mask } else { mask.resize_nearest(width, height) });
    }
    Ok(out)
}

// ── Evaluation ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ClipEval {
    pub clip_id: String,
    pub subject: String,
    pub miou: f64,
    /// Mean frame mIoU per window position (length T).
    pub per_position: Vec<f64>,
    /// Frame-level mIoU values in clip order.
    pub frame_mious: Vec<f64>,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub summary: IouSummary,
    pub confusion: ConfusionMatrix,
    pub clips: Vec<ClipEval>,
}

/// Runs the model over every T-window of the manifest, resizes argmax
/// masks back to each clip's original resolution, and accumulates the
/// confusion matrix. `smooth` applies Gaussian temporal smoothing to the
/// softmax maps before the argmax.
pub fn evaluate_model(
    model: &ModelGraph,
    manifest: &SequenceManifest,
    t: usize,
    smooth: Option<(usize, f64)>,
) -> Result<EvalOutcome> {
    let mut confusion = ConfusionMatrix::new(model.classes);
    let mut clips = Vec::new();
    let batch_cfg = BatchConfig { t, n: 1, shuffle: false, seed: 0 };
    for clip in &manifest.clips {
        let single = SequenceManifest::new(manifest.split, vec![clip.clone()]);
        let mut clip_confusion = ConfusionMatrix::new(model.classes);
        let mut position_scores: Vec<Vec<f64>> = vec![Vec::new(); t];
        let mut frame_mious = Vec::new();
        for batch in batch_sequences(&single, &batch_cfg)? {
            let batch = batch?;
            let logits = model.predict(&batch.images)?;
            let mut prob_frames = logits_to_prob_frames(&logits)?;
            if let Some((window, sigma)) = smooth {
                prob_frames = temporal_smooth(&prob_frames, window, sigma)?;
            }
            let masks = masks_from_probs(&prob_frames, clip.width, clip.height)?;
            let start = batch.windows[0].1;
            for (i, mask) in masks.iter().enumerate() {
                let gt = MaskFrame::load_png(&clip.masks[start + i])?;
                confusion.accumulate(&gt, mask)?;
                clip_confusion.accumulate(&gt, mask)?;
                let mut frame_cm = ConfusionMatrix::new(model.classes);
                frame_cm.accumulate(&gt, mask)?;
                if let Ok(s) = frame_cm.mean_iou(true) {
                    position_scores[i].push(s.miou);
                    frame_mious.push(s.miou);
                }
            }
        }
        let per_position = position_scores
            .iter()
            .map(|v| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 })
            .collect();
        clips.push(ClipEval {
            clip_id: clip.id.clone(),
            subject: clip.subject.clone(),
            miou: clip_confusion.mean_iou(true).map(|s| s.miou).unwrap_or(0.0),
            per_position,
            frame_mious,
        });
    }
    let summary = confusion.mean_iou(true)?;
    Ok(EvalOutcome { summary, confusion, clips })
}

/// Mean clip mIoU per group: clips sorted by id, split into consecutive
/// groups.
pub fn group_scores(clips: &[ClipEval], groups: usize) -> Result<Vec<f64>> {
    if groups < 2 || clips.len() < groups {
        return Err(Error::arg(
            "group_scores",
            format!("cannot split {} clips into {} groups", clips.len(), groups),
        ));
    }
    let mut sorted: Vec<&ClipEval> = clips.iter().collect();
    sorted.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let per = clips.len().div_ceil(groups);
    Ok(sorted
        .chunks(per)
        .map(|chunk| chunk.iter().map(|c| c.miou).sum::<f64>() / chunk.len() as f64)
        .collect())
}

pub fn subject_scores(clips: &[ClipEval]) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for clip in clips {
        for &m in &clip.frame_mious {
            out.push((clip.subject.clone(), m));
        }
    }
    out
}

/// One CSV row in the per-class IoU table layout (percent values).
pub fn iou_csv_row(label: &str, summary: &IouSummary) -> String {
    let cell = |i: usize| {
        summary
            .per_class
            .get(i)
            .copied()
            .flatten()
            .map(|v| format!("{:.2}", v * 100.0))
            .unwrap_or_else(|| "n/a".to_string())
    };
    format!(
        "{},{:.2},{},{},{},{},{}",
        label,
        summary.miou * 100.0,
        cell(classes::SKIN as usize),
        cell(classes::EYES as usize),
        cell(classes::OUTER_MOUTH as usize),
        cell(classes::INNER_MOUTH as usize),
        cell(classes::BACKGROUND as usize),
    )
}

pub const IOU_CSV_HEADER: &str = "method,miou,facial_skin,eyes,outer_mouth,inner_mouth,background";

/// Plain ASCII rendering of rows produced by [`iou_csv_row`].
pub fn render_iou_table(rows: &[String]) -> String {
    let mut all = vec![IOU_CSV_HEADER.to_string()];
    all.extend(rows.iter().cloned());
    let cells: Vec<Vec<&str>> = all.iter().map(|r| r.split(',').collect()).collect();
    let cols = cells[0].len();
    let widths: Vec<usize> =
        (0..cols).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    cells
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(c, v)| format!("{:>width$}", v, width = widths[c]))
                .collect::<Vec<_>>()
                .join("  ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

// ── Training ────────────────────────────────────────────────────────────

pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub step1_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub best_val_miou: f64,
    pub model: ModelGraph,
}

fn hash_inputs(cfg_json: &str, manifest_dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(cfg_json.as_bytes());
    for split in ["train", "val", "test"] {
        let p = manifest_dir.join(format!("{split}.json"));
        if p.exists() {
            h.update(std::fs::read(&p)?);
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

struct EpochStats {
    mean_loss: f64,
    val_miou: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_phase(
    phase: &str,
    model: &mut ModelGraph,
    opt_cfg: &OptimizerConfig,
    loss_cfg: &LossConfig,
    train: &SequenceManifest,
    val: &SequenceManifest,
    batch_cfg: &BatchConfig,
    eval_t: usize,
    epochs: usize,
    retain: Retain,
    run_dir: &Path,
    csv: &mut String,
) -> Result<(PathBuf, f64)> {
    let mut optimizer = Optimizer::new(opt_cfg.clone())?;
    let frozen = opt_cfg.frozen_groups.clone();
    let ckpt_path = run_dir.join(format!("{phase}.ssk"));
    // The starting weights compete for best-on-validation too; a converted
    // model begins at the baseline's quality and must not lose it.
    let mut best = evaluate_model(model, val, eval_t, None)?.summary.miou;
    model.save(&ckpt_path)?;
    csv.push_str(&format!("{phase},init,0,nan,{best:.6}\n"));
    for epoch in 0..epochs {
        let mut losses = Vec::new();
        let epoch_batches = batch_sequences(
            train,
            &BatchConfig { seed: batch_cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15), ..batch_cfg.clone() },
        )?;
        for batch in epoch_batches {
            let batch = batch?;
            let mut tape = GraphTape::new();
            let (logits, traced) = model.forward_with_frozen(&mut tape, &batch.images, &frozen)?;
            let loss = segmentation_objective(&mut tape, &logits, &batch.labels, loss_cfg)?;
            let loss_value = loss.item()?;
            if !loss_value.is_finite() {
                let dump = serde_json::json!({
                    "phase": phase,
                    "epoch": epoch,
                    "step": optimizer.steps_taken(),
                    "loss": format!("{loss_value}"),
                    "windows": batch.windows,
                });
                let dump_path = run_dir.join("nan_dump.json");
                std::fs::write(&dump_path, serde_json::to_string_pretty(&dump)?)?;
                return Err(Error::NonFinite(format!(
                    "{phase} loss at epoch {epoch}; offending batch dumped to {}",
                    dump_path.display()
                )));
            }
            losses.push(loss_value);
            let grads = tape.backward(&loss)?;
            model.store.absorb_grads(&traced, &grads)?;
            optimizer.step(&mut model.store)?;
            model.store.clear_grads();
        }
        let stats = EpochStats {
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            val_miou: evaluate_model(model, val, eval_t, None)?.summary.miou,
        };
        csv.push_str(&format!(
            "{phase},{epoch},{},{:.6},{:.6}\n",
            optimizer.steps_taken(),
            stats.mean_loss,
            stats.val_miou
        ));
        if retain == Retain::Final || stats.val_miou > best {
            best = stats.val_miou;
            model.save(&ckpt_path)?;
        }
    }
    // Retain either the highest-validation-mIoU weights or the final ones.
    model.load_params(&ckpt_path)?;
    Ok((ckpt_path, best))
}

/// The two-step protocol: a baseline FCN is trained frame-wise with
/// cross-entropy, converted to a ConvLSTM-FCN, and retrained on clip
/// windows with the configured loss (optionally freezing groups or
/// scaling their rates by gamma). The best-on-validation weights of each
/// step are kept.
pub fn train(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    let cfg_json = cfg.to_json_pretty()?;
    std::fs::write(run_dir.join("config.json"), &cfg_json)?;
    std::fs::write(
        run_dir.join("inputs.sha256"),
        hash_inputs(&cfg_json, &cfg.data.manifest_dir)?,
    )?;

    let train_manifest =
        SequenceManifest::load(&SynthDataset::manifest_path(&cfg.data.manifest_dir, Split::Train))?;
    let val_manifest =
        SequenceManifest::load(&SynthDataset::manifest_path(&cfg.data.manifest_dir, Split::Val))?;

    let mut csv = String::from("phase,epoch,steps,mean_loss,val_miou\n");
    let frames_per_batch = cfg.data.t * cfg.data.n;

    // Step 1: frame-wise baseline FCN with cross-entropy at flat rates,
    // unless an existing baseline checkpoint is given.
    let mut model = build_mini_fcn(&cfg.model, cfg.seed)?;
    let (step1_ckpt, step1_best) = if let Some(ckpt) = &cfg.train.step1_checkpoint {
        model.load_params(ckpt)?;
        let miou = evaluate_model(&model, &val_manifest, 1, None)?.summary.miou;
        csv.push_str(&format!("step1_fcn,loaded,0,nan,{miou:.6}\n"));
        (ckpt.clone(), miou)
    } else {
        let step1_batches = {
            let cfg1 = BatchConfig { t: 1, n: frames_per_batch, shuffle: true, seed: cfg.seed };
            batch_sequences(&train_manifest, &cfg1)?.batch_count()
        };
        let step1_opt = OptimizerConfig {
            gamma: 1.0,
            frozen_groups: Default::default(),
            total_steps: step1_batches * cfg.train.step1_epochs,
            ..cfg.optim.clone()
        };
        let step1_loss = LossConfig { kind: LossKind::CrossEntropy, ..cfg.loss.clone() };
        train_phase(
            "step1_fcn",
            &mut model,
            &step1_opt,
            &step1_loss,
            &train_manifest,
            &val_manifest,
            &BatchConfig { t: 1, n: frames_per_batch, shuffle: true, seed: cfg.seed },
            1,
            cfg.train.step1_epochs,
            Retain::Best,
            run_dir,
            &mut csv,
        )?
    };

    let (best_ckpt, best_miou, model) = if cfg.train.step1_only {
        (step1_ckpt.clone(), step1_best, model)
    } else {
        // Step 2: convert and retrain on clip windows.
        let mut converted = convert_to_convlstm_fcn(
            &model,
            &ConvertOptions {
                t: cfg.data.t,
                peephole: cfg.train.peephole,
                seed_from_classifier: cfg.train.seed_from_classifier,
                warm_scale: DEFAULT_WARM_SCALE,
                seed: cfg.seed ^ 0x5eed,
            },
        )?;
        let step2_batches = {
            let cfg2 = BatchConfig { t: cfg.data.t, n: cfg.data.n, shuffle: true, seed: cfg.seed };
            batch_sequences(&train_manifest, &cfg2)?.batch_count()
        };
        let step2_opt = OptimizerConfig {
            total_steps: if cfg.optim.total_steps > 0 {
                cfg.optim.total_steps
            } else {
                step2_batches * cfg.train.step2_epochs
            },
            ..cfg.optim.clone()
        };
        let (ckpt, best) = train_phase(
            "step2_convlstm",
            &mut converted,
            &step2_opt,
            &cfg.loss,
            &train_manifest,
            &val_manifest,
            &BatchConfig { t: cfg.data.t, n: cfg.data.n, shuffle: true, seed: cfg.seed },
            cfg.data.t,
            cfg.train.step2_epochs,
            cfg.train.retain,
            run_dir,
            &mut csv,
        )?;
        (ckpt, best, converted)
    };

    let metrics_csv = run_dir.join("metrics.csv");
    std::fs::write(&metrics_csv, &csv)?;
    Ok(RunArtifacts {
        run_dir: run_dir.to_path_buf(),
        step1_checkpoint: step1_ckpt,
        best_checkpoint: best_ckpt,
        metrics_csv,
        best_val_miou: best_miou,
        model,
    })
}

// ── Cascade evaluation ─────────────────────────────────────────────────

pub struct CascadeReport {
    pub primary: IouSummary,
    pub integrated: IouSummary,
    pub csv: String,
}

/// Evaluates primary-only vs integrated predictions over every T-window
/// of the manifest.
pub fn cascade_evaluate(bundle: &CascadeBundle, manifest: &SequenceManifest, t: usize) -> Result<CascadeReport> {
    let mut primary_cm = ConfusionMatrix::new(classes::COUNT);
    let mut integrated_cm = ConfusionMatrix::new(classes::COUNT);
    for clip in &manifest.clips {
        let windows = clip.frames.len() / t;
        for wi in 0..windows {
            let start = wi * t;
            let frames: Vec<RgbFrame> = clip.frames[start..start + t]
                .iter()
                .map(|p| RgbFrame::load_png(p))
                .collect::<Result<_>>()?;
            let gts: Vec<MaskFrame> = clip.masks[start..start + t]
                .iter()
                .map(|p| MaskFrame::load_png(p))
                .collect::<Result<_>>()?;

            let batch = {
                let chw = 3 * frames[0].height * frames[0].width;
                let mut data = vec![0.0; t * chw];
                for (i, f) in frames.iter().enumerate() {
                    data[i * chw..(i + 1) * chw].copy_from_slice(&f.to_chw());
                }
                Tensor::new(vec![t, 3, frames[0].height, frames[0].width], data)?
            };
            let primary_masks = logits_to_masks(&bundle.primary.predict(&batch)?)?;
            let integrated_masks = run_cascade(bundle, &frames)?;
            for i in 0..t {
                let gt = gts[i].resize_nearest(clip.width, clip.height);
                primary_cm.accumulate(&gt, &primary_masks[i].resize_nearest(clip.width, clip.height))?;
                integrated_cm.accumulate(&gt, &integrated_masks[i].resize_nearest(clip.width, clip.height))?;
            }
        }
    }
    let primary = primary_cm.mean_iou(true)?;
    let integrated = integrated_cm.mean_iou(true)?;
    let csv = format!(
        "{}\n{}\n{}\n",
        IOU_CSV_HEADER,
        iou_csv_row("primary_only", &primary),
        iou_csv_row("integrated", &integrated)
    );
    Ok(CascadeReport { primary, integrated, csv })
}

// ── Significance and profiles over two models ──────────────────────────

pub struct ComparisonReport {
    pub profile: Vec<f64>,
    pub significance: Significance,
    pub subjects: Vec<SubjectStats>,
}

/// Temporal-improvement profile, grouped significance, and per-subject
/// stats of `model` against `baseline` on the same manifest.
pub fn compare_models(
    model_eval: &EvalOutcome,
    baseline_eval: &EvalOutcome,
    groups: usize,
    alpha: f64,
) -> Result<ComparisonReport> {
    let rows_m: Vec<Vec<f64>> = model_eval.clips.iter().map(|c| c.per_position.clone()).collect();
    let rows_b: Vec<Vec<f64>> = baseline_eval.clips.iter().map(|c| c.per_position.clone()).collect();
    let profile = temporal_improvement_profile(&rows_m, &rows_b)?;
    let ga = group_scores(&model_eval.clips, groups)?;
    let gb = group_scores(&baseline_eval.clips, groups)?;
    let significance = grouped_significance(&ga, &gb, alpha)?;
    let subjects = crate::metrics::per_subject_report(&subject_scores(&model_eval.clips));
    Ok(ComparisonReport { profile, significance, subjects })
}

// ── Gradient-check suite ────────────────────────────────────────────────

pub struct GradCheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub struct GradCheckSummary {
    pub lines: Vec<GradCheckLine>,
    pub elapsed_secs: f64,
}

impl GradCheckSummary {
    pub fn all_pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&format!(
                "{} {:<44} max rel err {:.3e}\n",
                if l.pass { "pass" } else { "FAIL" },
                l.name,
                l.max_rel_err
            ));
        }
        out.push_str(&format!(
            "{} checks in {:.1}s: {}\n",
            self.lines.len(),
            self.elapsed_secs,
            if self.all_pass() { "all pass" } else { "FAILURES" }
        ));
        out
    }
}

const GRADCHECK_EPS: f64 = 1e-4;
const GRADCHECK_TOL: f64 = 1e-3;

/// Finite-difference verification of every differentiable operation on
/// randomized small shapes, plus the composed mini ConvLSTM-FCN graph
/// against each of the three losses on seeded 16x16 inputs.
pub fn gradcheck_suite(trials_per_op: usize) -> Result<GradCheckSummary> {
    use rand::{Rng, SeedableRng};
    let started = Instant::now();
    let mut lines = Vec::new();
    let mut push = |name: String, report: crate::tensor::GradCheckReport| {
        lines.push(GradCheckLine { name, max_rel_err: report.max_rel_err(), pass: report.pass() });
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
    for trial in 0..trials_per_op {
        let h = rng.gen_range(4..7usize);
        let w = rng.gen_range(4..7usize);
        let cin = rng.gen_range(1..3usize);
        let cout = rng.gen_range(1..3usize);
        let input = Tensor::uniform(vec![1, cin, h, w], 1.0, &mut rng);
        let weight = Tensor::uniform(vec![cout, cin, 3, 3], 0.6, &mut rng);
        let bias = Tensor::uniform(vec![cout], 0.3, &mut rng);
        let stride = 1 + trial % 2;
        let dilation = 1 + (trial / 2) % 2;
        let seed = rng.gen();

        let report = finite_diff_check(
            move |tape, p| {
                let y = ops::conv2d(tape, &p[2], &p[0], Some(&p[1]), stride, dilation, ops::Padding::Same)?;
                let s = ops::sigmoid(tape, &y);
                Ok(ops::mean_all(tape, &s))
            },
            &[("weight", weight), ("bias", bias), ("input", input.clone())],
            GRADCHECK_EPS,
            GRADCHECK_TOL,
            Some(6),
            seed,
        )?;
        push(format!("conv2d s{stride} d{dilation} trial {trial}"), report);

        let pool_in = Tensor::uniform(vec![1, cin, 6, 6], 1.0, &mut rng);
        let report = finite_diff_check(
            move |tape, p| {
                let y = ops::max_pool2d(tape, &p[0], 3, 2)?;
                Ok(ops::sum_all(tape, &y))
            },
            &[("input", pool_in)],
            GRADCHECK_EPS,
            GRADCHECK_TOL,
            Some(8),
            seed ^ 1,
        )?;
        push(format!("max_pool2d trial {trial}"), report);

        let up_in = Tensor::uniform(vec![1, cin, 3, 3], 1.0, &mut rng);
        let report = finite_diff_check(
            move |tape, p| {
                let y = ops::bilinear_upsample(tape, &p[0], 7, 5)?;
                let s = ops::tanh(tape, &y);
                Ok(ops::mean_all(tape, &s))
            },
            &[("input", up_in)],
            GRADCHECK_EPS,
            GRADCHECK_TOL,
            Some(6),
            seed ^ 2,
        )?;
        push(format!("bilinear_upsample trial {trial}"), report);

        let a = Tensor::uniform(vec![2, 3], 1.0, &mut rng);
        let b = Tensor::uniform(vec![2, 3], 1.0, &mut rng);
        let report = finite_diff_check(
            move |tape, p| {
                let sum = ops::add(tape, &p[0], &p[1])?;
                let diff = ops::sub(tape, &p[0], &p[1])?;
                let prod = ops::mul(tape, &sum, &diff)?;
                let scaled = ops::scale(tape, &prod, 0.7);
                let act = ops::relu(tape, &scaled);
                let sq = ops::sigmoid(tape, &act);
                Ok(ops::sum_all(tape, &sq))
            },
            &[("a", a), ("b", b)],
            GRADCHECK_EPS,
            GRADCHECK_TOL,
            None,
            seed ^ 3,
        )?;
        push(format!("elementwise chain trial {trial}"), report);

        let maps = Tensor::uniform(vec![2, 3, 2, 2], 1.0, &mut rng);
        let peep = Tensor::uniform(vec![3, 2, 2], 1.0, &mut rng);
        let report = finite_diff_check(
            move |tape, p| {
                let sm = ops::softmax_channels(tape, &p[0])?;
                let pm = ops::mul_map(tape, &sm, &p[1])?;
                let rows = ops::flatten_samples(tape, &pm)?;
                let back = ops::reshape(tape, &rows, vec![2, 2, 2, 3])?;
                Ok(ops::mean_all(tape, &back))
            },
            &[("maps", maps), ("peep", peep)],
            GRADCHECK_EPS,
            GRADCHECK_TOL,
            Some(8),
            seed ^ 4,
        )?;
        push(format!("softmax/mul_map/flatten trial {trial}"), report);
    }

    // ConvLSTM step, all weight matrices.
    {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let cfg = ConvLstmConfig {
            in_channels: 2,
            hidden_channels: 2,
            kernel: (3, 3),
            spatial: (3, 3),
            peephole: true,
        };
        let mut cell = ConvLstmCell::init(cfg, &mut rng);
        for name in ["W_ci", "W_cf", "W_co", "b_i", "b_f", "b_c", "b_o"] {
            let shape = cell.param_mut(name).unwrap().shape().to_vec();
            *cell.param_mut(name).unwrap() = Tensor::uniform(shape, 0.4, &mut rng);
        }
        let x = Tensor::uniform(vec![1, 2, 3, 3], 1.0, &mut rng);
        let h0 = Tensor::uniform(vec![1, 2, 3, 3], 0.5, &mut rng);
        let c0 = Tensor::uniform(vec![1, 2, 3, 3], 0.5, &mut rng);
        let named: Vec<(&str, Tensor)> =
            cell.params().iter().map(|(n, t)| (*n, (*t).clone())).collect();
        let report = finite_diff_check(
            move |tape, params| {
                let mut probe = cell.clone();
                for (i, name) in crate::convlstm::PARAM_NAMES.iter().enumerate() {
                    *probe.param_mut(name).unwrap() = params[i].clone();
                }
                let (h, _) = convlstm_step(tape, &probe, &x, &h0, &c0)?;
                Ok(ops::sum_all(tape, &h))
            },
            &named,
            GRADCHECK_EPS,
            GRADCHECK_TOL,
            Some(5),
            31,
        )?;
        push("convlstm_step (all weight matrices)".to_string(), report);
    }

    // Composed graph: mini ConvLSTM-FCN into each loss, 16x16 inputs.
    for kind in [LossKind::CrossEntropy, LossKind::Iou, LossKind::Segmentation] {
        let report = composed_gradcheck(kind, 16, 2)?;
        push(format!("convlstm-fcn -> {kind:?} (16x16)"), report);
    }

    Ok(GradCheckSummary { lines, elapsed_secs: started.elapsed().as_secs_f64() })
}

/// Spot-checks every parameter of the converted model against central
/// differences through the full forward + loss graph.
pub fn composed_gradcheck(kind: LossKind, input_size: usize, t: usize) -> Result<crate::tensor::GradCheckReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let cfg = crate::models::ModelConfig {
        base_width: 4,
        ..crate::models::ModelConfig::mini(input_size, 3)
    };
    let fcn = build_mini_fcn(&cfg, 7)?;
    let model = convert_to_convlstm_fcn(
        &fcn,
        &ConvertOptions { t, peephole: true, seed_from_classifier: true, warm_scale: DEFAULT_WARM_SCALE, seed: 8 },
    )?;
    let batch = Tensor::uniform(vec![t, 3, input_size, input_size], 0.5, &mut rng);
    let labels: Vec<u8> = (0..t * input_size * input_size).map(|_| rng.gen_range(0..3u8)).collect();
    let loss_cfg = LossConfig {
        kind,
        variant: crate::losses::SegVariant::Linear,
        margin_g: 0.0,
        include_background: true,
    };

    let names = model.store.names();
    let named: Vec<(String, Tensor)> = names
        .iter()
        .map(|n| (n.clone(), model.store.get(n).unwrap().clone()))
        .collect();
    let named_refs: Vec<(&str, Tensor)> =
        named.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    finite_diff_check(
        move |tape, params| {
            let mut probe = model.clone();
            for (i, name) in names.iter().enumerate() {
                *probe.store.get_mut(name).unwrap() = params[i].clone();
            }
            let (logits, _) = probe.forward(tape, &batch)?;
            segmentation_objective(tape, &logits, &labels, &loss_cfg)
        },
        &named_refs,
        GRADCHECK_EPS,
        GRADCHECK_TOL,
        Some(5),
        2024,
    )
}

/// Writes a text report next to wherever the caller wants it.
pub fn write_report(path: &Path, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_dispatch_matches_direct_losses() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::uniform(vec![2, 3, 2, 2], 1.0, &mut rng);
        let labels: Vec<u8> = (0..8).map(|_| rng.gen_range(0..3u8)).collect();
        for kind in [LossKind::CrossEntropy, LossKind::Iou, LossKind::Segmentation] {
            let cfg = LossConfig { kind, ..LossConfig::default() };
            let mut tape = GraphTape::new();
            let loss = segmentation_objective(&mut tape, &logits, &labels, &cfg).unwrap();
            assert!(loss.item().unwrap().is_finite());
        }
    }

    #[test]
    fn objective_gradients_flow_to_scores() {
        let mut tape = GraphTape::new();
        let base = Tensor::uniform(
            vec![1, 3, 2, 2],
            1.0,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5),
        );
        let logits = tape.leaf(&base, true);
        let labels = vec![0u8, 1, 2, 0];
        let cfg = LossConfig { kind: LossKind::Segmentation, ..LossConfig::default() };
        let loss = segmentation_objective(&mut tape, &logits, &labels, &cfg).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.get(&logits).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn prob_frames_are_normalized_per_pixel() {
        let logits = Tensor::uniform(
            vec![2, 4, 3, 3],
            2.0,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(8),
        );
        let frames = logits_to_prob_frames(&logits).unwrap();
        assert_eq!(frames.len(), 2);
        for f in frames {
            for p in 0..9 {
                let sum: f64 = (0..4).map(|c| f.data()[c * 9 + p]).sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn csv_row_layout() {
        let summary = IouSummary {
            miou: 0.5,
            per_class: vec![Some(0.9), Some(0.8), Some(0.4), None, Some(0.2)],
        };
        let row = iou_csv_row("demo", &summary);
        assert_eq!(row, "demo,50.00,80.00,40.00,n/a,20.00,90.00");
        let table = render_iou_table(&[row]);
        assert!(table.contains("method"));
        assert!(table.lines().count() == 2);
    }
}
