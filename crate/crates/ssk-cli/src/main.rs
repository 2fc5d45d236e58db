//! `ssk` — experiment runner for the sequence segmentation kit.
//!
//! Subcommands: `synth`, `convert-landmarks`, `train`, `eval`,
//! `cascade-eval`, `gradcheck`, `stats`. Failures exit nonzero with a
//! machine-readable JSON error on stderr. `SSK_SEED` overrides the
//! config seed for `synth` and `train`.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use ssk::cascade::CascadeBundle;
use ssk::config::ExperimentConfig;
use ssk::data::{
    build_region_subdataset, landmarks_to_mask, synth_video_generate, CropConfig, LandmarkFrame,
    RegionKind, SequenceManifest, SubdatasetConfig, SynthConfig,
};
use ssk::experiment;
use ssk::metrics::grouped_significance;
use ssk::models::{build_mini_fcn, convert_to_convlstm_fcn, ConvertOptions, ModelGraph, DEFAULT_WARM_SCALE};

#[derive(Parser)]
#[command(name = "ssk", about = "ConvLSTM-FCN video segmentation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic video dataset (or a zoomed-in region
    /// sub-dataset from an existing one).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 60)]
        train_clips: usize,
        #[arg(long, default_value_t = 8)]
        val_clips: usize,
        #[arg(long, default_value_t = 12)]
        test_clips: usize,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 5)]
        occluder_period: usize,
        #[arg(long, default_value_t = 2)]
        occluder_phase: usize,
        #[arg(long, default_value_t = 2)]
        occluder_len: usize,
        #[arg(long, default_value_t = 0.04)]
        noise: f64,
        /// Instead of synthesizing, crop this region out of `--from`.
        #[arg(long, value_parser = parse_region)]
        region: Option<RegionKind>,
        /// Parent dataset directory for `--region`.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Region crop target as WxH, e.g. 64x32.
        #[arg(long, default_value = "64x32")]
        region_size: String,
        #[arg(long, default_value_t = 5)]
        t: usize,
        #[arg(long, default_value_t = 0.1)]
        crop_noise: f64,
    },
    /// Rasterize a 68-landmark `.pts` text file into a class-index mask
    /// PNG and print its SHA-256.
    ConvertLandmarks {
        #[arg(long)]
        pts: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the two-step training protocol from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over a manifest; optionally smooth softmax
    /// maps temporally, compare against a baseline checkpoint, and emit
    /// per-subject statistics.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Baseline checkpoint for temporal profile + significance.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Gaussian temporal smoothing of the softmax maps (window 5,
        /// sigma 0.6) before the argmax.
        #[arg(long)]
        smooth: bool,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        per_subject: bool,
        /// Report directory (CSV + JSON); prints the table either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the primary + zoomed-in cascade over a manifest and report
    /// primary-only vs integrated IoU.
    CascadeEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        primary: PathBuf,
        #[arg(long)]
        eyes: Option<PathBuf>,
        #[arg(long)]
        mouth: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks over the registered operation set and the
    /// composed model-plus-loss graphs.
    Gradcheck {
        /// Randomized trials per operation family.
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Paired two-tailed t-test between two per-group score files (one
    /// value per line).
    Stats {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
}

fn parse_region(s: &str) -> Result<RegionKind, String> {
    match s {
        "eyes" => Ok(RegionKind::Eyes),
        "mouth" => Ok(RegionKind::Mouth),
        other => Err(format!("unknown region '{other}' (expected eyes|mouth)")),
    }
}

fn parse_size(s: &str) -> anyhow::Result<(usize, usize)> {
    let (w, h) = s.split_once('x').context("size must look like 64x32")?;
    Ok((w.parse()?, h.parse()?))
}

fn seed_override(seed: u64) -> u64 {
    match std::env::var("SSK_SEED") {
        Ok(v) => v.parse().unwrap_or_else(|_| {
            eprintln!("SSK_SEED={v} is not an integer; keeping configured seed");
            seed
        }),
        Err(_) => seed,
    }
}

/// Rebuilds the model a checkpoint belongs to: the experiment config
/// gives the architecture, the checkpoint keys tell whether it is the
/// baseline FCN or the converted ConvLSTM-FCN.
fn model_for_checkpoint(cfg: &ExperimentConfig, ckpt: &std::path::Path) -> anyhow::Result<ModelGraph> {
    let entries = ssk::checkpoint::load_checkpoint(ckpt)?;
    let fcn = build_mini_fcn(&cfg.model, cfg.seed)?;
    let mut model = if entries.keys().any(|k| k.starts_with("convlstm/")) {
        convert_to_convlstm_fcn(
            &fcn,
            &ConvertOptions {
                t: cfg.data.t,
                peephole: cfg.train.peephole,
                seed_from_classifier: cfg.train.seed_from_classifier,
                warm_scale: DEFAULT_WARM_SCALE,
                seed: cfg.seed,
            },
        )?
    } else {
        fcn
    };
    model.store.load_checkpoint_entries(&entries)?;
    Ok(model)
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Synth {
            out,
            seed,
            train_clips,
            val_clips,
            test_clips,
            frames,
            width,
            height,
            occluder_period,
            occluder_phase,
            occluder_len,
            noise,
            region,
            from,
            region_size,
            t,
            crop_noise,
        } => {
            if let Some(kind) = region {
                let parent_dir = from.context("--region needs --from <parent dataset dir>")?;
                let input = parse_size(&region_size)?;
                for split in ["train", "val", "test"] {
                    let path = parent_dir.join(format!("{split}.json"));
                    if !path.exists() {
                        continue;
                    }
                    let parent = SequenceManifest::load(&path)?;
                    let sub = build_region_subdataset(
                        &parent,
                        &SubdatasetConfig {
                            kind,
                            input,
                            t,
                            crop: CropConfig { margin: 0.5, noise: crop_noise },
                            seed: seed_override(seed),
                        },
                        &out,
                    )?;
                    println!("{split}: {} clips, {} frames", sub.clips.len(), sub.total_frames());
                }
            } else {
                let cfg = SynthConfig {
                    seed: seed_override(seed),
                    train_clips,
                    val_clips,
                    test_clips,
                    frames_per_clip: frames,
                    width,
                    height,
                    occluder_period,
                    occluder_phase,
                    occluder_len,
                    noise,
                    ..SynthConfig::default()
                };
                let ds = synth_video_generate(&cfg, &out)?;
                println!(
                    "wrote {} train / {} val / {} test clips under {}",
                    ds.train.clips.len(),
                    ds.val.clips.len(),
                    ds.test.clips.len(),
                    out.display()
                );
            }
            Ok(())
        }

        Cmd::ConvertLandmarks { pts, width, height, out } => {
            let text = std::fs::read_to_string(&pts)?;
            let lm = LandmarkFrame::from_pts_text(&text)?;
            let mask = landmarks_to_mask(&lm, width, height)?;
            mask.save_png(&out)?;
            let mut hasher = Sha256::new();
            hasher.update(mask.data());
            println!("{:x}", hasher.finalize());
            Ok(())
        }

        Cmd::Train { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.seed = seed_override(cfg.seed);
            let artifacts = experiment::train(&cfg, &out)?;
            println!(
                "best validation mIoU {:.4}; checkpoint {}",
                artifacts.best_val_miou,
                artifacts.best_checkpoint.display()
            );
            Ok(())
        }

        Cmd::Eval {
            config,
            checkpoint,
            manifest,
            baseline,
            smooth,
            groups,
            alpha,
            per_subject,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let model = model_for_checkpoint(&cfg, &checkpoint)?;
            let manifest = SequenceManifest::load(&manifest)?;
            let smooth_opt = smooth.then_some((5usize, 0.6f64));
            let t = model.clip_t.unwrap_or(cfg.data.t);
            let outcome = experiment::evaluate_model(&model, &manifest, t, smooth_opt)?;

            let mut rows = vec![experiment::iou_csv_row("model", &outcome.summary)];
            let mut report = serde_json::json!({
                "miou": outcome.summary.miou,
                "per_class": outcome.summary.per_class,
            });
            if let Some(baseline_path) = baseline {
                let base_model = model_for_checkpoint(&cfg, &baseline_path)?;
                let base_t = base_model.clip_t.unwrap_or(cfg.data.t);
                let base = experiment::evaluate_model(&base_model, &manifest, base_t, None)?;
                rows.push(experiment::iou_csv_row("baseline", &base.summary));
                let cmp = experiment::compare_models(&outcome, &base, groups.unwrap_or(10), alpha)?;
                println!("temporal improvement profile: {:?}", cmp.profile);
                println!(
                    "paired t-test over {} groups: t={:.4}, p={:.6}, significant={}",
                    groups.unwrap_or(10),
                    cmp.significance.t_stat,
                    cmp.significance.p_value,
                    cmp.significance.significant
                );
                report["profile"] = serde_json::json!(cmp.profile);
                report["p_value"] = serde_json::json!(cmp.significance.p_value);
                // Reports record which test backs the p-value.
                report["significance_test"] = serde_json::json!("paired two-tailed t-test");
            }
            if per_subject {
                let subjects =
                    ssk::metrics::per_subject_report(&experiment::subject_scores(&outcome.clips));
                for s in &subjects {
                    println!("subject {}: mean {:.4} std {:.4} ({} frames)", s.subject, s.mean, s.std, s.frames);
                }
                report["subjects"] = serde_json::json!(subjects
                    .iter()
                    .map(|s| serde_json::json!({
                        "subject": s.subject, "mean": s.mean, "std": s.std, "frames": s.frames
                    }))
                    .collect::<Vec<_>>());
            }
            println!("{}", experiment::render_iou_table(&rows));
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let csv = format!("{}\n{}\n", experiment::IOU_CSV_HEADER, rows.join("\n"));
                std::fs::write(dir.join("iou.csv"), csv)?;
                std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            }
            Ok(())
        }

        Cmd::CascadeEval { config, primary, eyes, mouth, manifest, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let primary_model = model_for_checkpoint(&cfg, &primary)?;
            let cascade_cfg = cfg.cascade.clone().unwrap_or_default();
            let load_sub = |path: Option<PathBuf>, classes: usize, input: (usize, usize)| -> anyhow::Result<Option<ModelGraph>> {
                let Some(path) = path else { return Ok(None) };
                let sub_cfg = ExperimentConfig {
                    model: ssk::models::ModelConfig {
                        input_size: input.0,
                        input_height: Some(input.1),
                        classes,
                        ..cfg.model.clone()
                    },
                    ..cfg.clone()
                };
                Ok(Some(model_for_checkpoint(&sub_cfg, &path)?))
            };
            let eye_model = load_sub(eyes, 2, cascade_cfg.eye_input)?;
            let mouth_model = load_sub(mouth, 3, cascade_cfg.mouth_input)?;
            let bundle = CascadeBundle::new(primary_model, eye_model, mouth_model, cascade_cfg)?;
            let manifest = SequenceManifest::load(&manifest)?;
            let report = experiment::cascade_evaluate(&bundle, &manifest, cfg.data.t)?;
            println!(
                "{}",
                experiment::render_iou_table(&[
                    experiment::iou_csv_row("primary_only", &report.primary),
                    experiment::iou_csv_row("integrated", &report.integrated),
                ])
            );
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("cascade.csv"), &report.csv)?;
            }
            Ok(())
        }

        Cmd::Gradcheck { trials } => {
            let summary = experiment::gradcheck_suite(trials)?;
            print!("{}", summary.render());
            if !summary.all_pass() {
                bail!("gradient checks failed");
            }
            Ok(())
        }

        Cmd::Stats { a, b, alpha } => {
            let read = |p: &PathBuf| -> anyhow::Result<Vec<f64>> {
                Ok(std::fs::read_to_string(p)?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| l.trim().parse::<f64>())
                    .collect::<Result<_, _>>()?)
            };
            let sig = grouped_significance(&read(&a)?, &read(&b)?, alpha)?;
            println!(
                "{}",
                serde_json::json!({
                    "test": "paired two-tailed t-test",
                    "t": sig.t_stat,
                    "p_value": sig.p_value,
                    "alpha": alpha,
                    "significant": sig.significant,
                })
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
