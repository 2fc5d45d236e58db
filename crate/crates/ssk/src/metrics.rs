//! Confusion-matrix accounting, per-class IoU and mIoU, per-frame
//! temporal-improvement profiles, per-subject reports, and the paired
//! significance test used for grouped comparisons.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::MaskFrame;
use crate::error::{Error, Result};

/// `C x C` pixel counts; rows index the annotation, columns the prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, annotation: usize, prediction: usize) -> u64 {
        self.counts[annotation * self.classes + prediction]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn record(&mut self, annotation: u8, prediction: u8) -> Result<()> {
        let (a, p) = (annotation as usize, prediction as usize);
        if a >= self.classes || p >= self.classes {
            return Err(Error::Data(format!(
                "class pair ({}, {}) out of range for C={}",
                a, p, self.classes
            )));
        }
        self.counts[a * self.classes + p] += 1;
        Ok(())
    }

    /// Adds every pixel pair of an annotation/prediction mask pair.
    pub fn accumulate(&mut self, gt: &MaskFrame, pred: &MaskFrame) -> Result<()> {
        if gt.width() != pred.width() || gt.height() != pred.height() {
            return Err(Error::shape(
                "ConfusionMatrix::accumulate",
                format!(
                    "annotation {}x{} vs prediction {}x{}",
                    gt.width(), gt.height(), pred.width(), pred.height()
                ),
            ));
        }
        for (&a, &p) in gt.data().iter().zip(pred.data()) {
            self.record(a, p)?;
        }
        Ok(())
    }

    /// Shard merge; summation is associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(
                "ConfusionMatrix::merge",
                format!("{} vs {} classes", other.classes, self.classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU `n_ii / (sum_j n_ij + sum_j n_ji - n_ii)` and the mean
    /// over included classes. Classes whose union is zero are undefined
    /// (`None`) and excluded from the mean; `exclude_background` drops
    /// class 0 from the mean but still reports it.
    pub fn mean_iou(&self, exclude_background: bool) -> Result<IouSummary> {
        let c = self.classes;
        let mut per_class = vec![None; c];
        for (t, slot) in per_class.iter_mut().enumerate() {
            let row: u64 = (0..c).map(|j| self.count(t, j)).sum();
            let col: u64 = (0..c).map(|j| self.count(j, t)).sum();
            let union = row + col - self.count(t, t);
            if union > 0 {
                *slot = Some(self.count(t, t) as f64 / union as f64);
            }
        }
        let start = usize::from(exclude_background);
        let included: Vec<f64> = per_class[start..].iter().flatten().copied().collect();
        if included.is_empty() {
            return Err(Error::Data("mean_iou: every included class has zero union".to_string()));
        }
        let miou = included.iter().sum::<f64>() / included.len() as f64;
        Ok(IouSummary { miou, per_class })
    }
}

#[derive(Clone, Debug)]
pub struct IouSummary {
    pub miou: f64,
    /// Indexed by class; `None` when the class never appears in either
    /// the annotations or the predictions.
    pub per_class: Vec<Option<f64>>,
}

/// Mean per-frame-position improvement (model - baseline), averaged over
/// clips. Inputs are per-clip rows of per-frame mIoU, frames aligned.
pub fn temporal_improvement_profile(
    per_clip_model: &[Vec<f64>],
    per_clip_baseline: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if per_clip_model.len() != per_clip_baseline.len() || per_clip_model.is_empty() {
        return Err(Error::shape(
            "temporal_improvement_profile",
            format!("{} model clips vs {} baseline clips", per_clip_model.len(), per_clip_baseline.len()),
        ));
    }
    let t = per_clip_model[0].len();
    let mut sums = vec![0.0; t];
    for (m, b) in per_clip_model.iter().zip(per_clip_baseline) {
        if m.len() != t || b.len() != t {
            return Err(Error::shape(
                "temporal_improvement_profile",
                format!("frame count mismatch: expected {}, got {} and {}", t, m.len(), b.len()),
            ));
        }
        for i in 0..t {
            sums[i] += m[i] - b[i];
        }
    }
    let clips = per_clip_model.len() as f64;
    Ok(sums.into_iter().map(|s| s / clips).collect())
}

#[derive(Clone, Copy, Debug)]
pub struct Significance {
    pub t_stat: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Paired two-tailed t-test over per-group scores.
///
/// Degenerate inputs fall out of the t statistic: identical pairs give
/// p = 1, zero variance with a nonzero mean gives p = 0.
pub fn grouped_significance(groups_a: &[f64], groups_b: &[f64], alpha: f64) -> Result<Significance> {
    let g = groups_a.len();
    if g < 2 || groups_b.len() != g {
        return Err(Error::arg(
            "grouped_significance",
            format!("need >= 2 paired groups, got {} and {}", g, groups_b.len()),
        ));
    }
    let diffs: Vec<f64> = groups_a.iter().zip(groups_b).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / g as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (g as f64 - 1.0);
    let sd = var.sqrt();

    let (t_stat, p_value) = if sd == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        }
    } else {
        let t = mean / (sd / (g as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, g as f64 - 1.0)
            .map_err(|e| Error::arg("grouped_significance", e.to_string()))?;
        let p = 2.0 * (1.0 - dist.cdf(t.abs()));
        (t, p.clamp(0.0, 1.0))
    };
    Ok(Significance { t_stat, p_value, significant: p_value < alpha })
}

#[derive(Clone, Debug)]
pub struct SubjectStats {
    pub subject: String,
    pub frames: usize,
    pub mean: f64,
    /// Population standard deviation over the subject's frames.
    pub std: f64,
}

/// Per-subject mean/std over frame scores, subjects in first-seen order.
pub fn per_subject_report(results: &[(String, f64)]) -> Vec<SubjectStats> {
    let mut order: Vec<String> = Vec::new();
    let mut values: std::collections::HashMap<&str, Vec<f64>> = std::collections::HashMap::new();
    for (subject, v) in results {
        if !values.contains_key(subject.as_str()) {
            order.push(subject.clone());
        }
        values.entry(subject.as_str()).or_default().push(*v);
    }
    let mut out = Vec::with_capacity(order.len());
    for subject in order {
        let vs = &values[subject.as_str()];
        if vs.is_empty() {
            log::warn!("subject {subject} has no frames; skipped");
            continue;
        }
        let mean = vs.iter().sum::<f64>() / vs.len() as f64;
        let var = vs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vs.len() as f64;
        out.push(SubjectStats { subject, frames: vs.len(), mean, std: var.sqrt() });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_pixel_case() -> ConfusionMatrix {
        let gt = MaskFrame::new(4, 1, vec![1, 1, 2, 0]).unwrap();
        let pred = MaskFrame::new(4, 1, vec![1, 2, 2, 0]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &pred).unwrap();
        cm
    }

    #[test]
    fn accumulate_counts_pixel_pairs() {
        let cm = four_pixel_case();
        assert_eq!(cm.count(1, 1), 1);
        assert_eq!(cm.count(1, 2), 1);
        assert_eq!(cm.count(2, 2), 1);
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = MaskFrame::new(3, 1, vec![0, 1, 2]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.count(i, j), u64::from(i == j));
            }
        }
        assert_eq!(cm.mean_iou(true).unwrap().miou, 1.0);
    }

    #[test]
    fn accumulation_is_order_independent() {
        let a = (
            MaskFrame::new(2, 1, vec![0, 1]).unwrap(),
            MaskFrame::new(2, 1, vec![1, 1]).unwrap(),
        );
        let b = (
            MaskFrame::new(2, 1, vec![2, 2]).unwrap(),
            MaskFrame::new(2, 1, vec![2, 0]).unwrap(),
        );
        let mut ab = ConfusionMatrix::new(3);
        ab.accumulate(&a.0, &a.1).unwrap();
        ab.accumulate(&b.0, &b.1).unwrap();
        let mut ba = ConfusionMatrix::new(3);
        ba.accumulate(&b.0, &b.1).unwrap();
        ba.accumulate(&a.0, &a.1).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn accumulate_rejects_resolution_mismatch() {
        let gt = MaskFrame::filled(2, 2, 0);
        let pred = MaskFrame::filled(3, 2, 0);
        assert!(ConfusionMatrix::new(3).accumulate(&gt, &pred).is_err());
    }

    #[test]
    fn mean_iou_four_pixel_fixture() {
        let summary = four_pixel_case().mean_iou(true).unwrap();
        assert_eq!(summary.per_class[1], Some(0.5));
        assert_eq!(summary.per_class[2], Some(0.5));
        assert!((summary.miou - 0.5).abs() < 1e-12);
        // Background included: (1 + 0.5 + 0.5) / 3
        let with_bg = four_pixel_case().mean_iou(false).unwrap();
        assert!((with_bg.miou - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn missed_region_scores_zero() {
        // Every eye pixel predicted background: IoU for that class is 0.
        let gt = MaskFrame::new(4, 1, vec![2, 2, 0, 0]).unwrap();
        let pred = MaskFrame::new(4, 1, vec![0, 0, 0, 0]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &pred).unwrap();
        let summary = cm.mean_iou(true).unwrap();
        assert_eq!(summary.per_class[2], Some(0.0));
        assert_eq!(summary.miou, 0.0);
    }

    #[test]
    fn mean_iou_rejects_all_empty() {
        // Only background pixels: no non-background class has a union.
        let gt = MaskFrame::filled(2, 2, 0);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt).unwrap();
        assert!(cm.mean_iou(true).is_err());
        assert!(cm.mean_iou(false).is_ok());
    }

    #[test]
    fn absent_class_is_excluded_not_scored() {
        let gt = MaskFrame::new(2, 1, vec![1, 0]).unwrap();
        let pred = MaskFrame::new(2, 1, vec![1, 0]).unwrap();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&gt, &pred).unwrap();
        let summary = cm.mean_iou(true).unwrap();
        assert_eq!(summary.per_class[2], None);
        assert_eq!(summary.per_class[3], None);
        assert_eq!(summary.miou, 1.0);
    }

    #[test]
    fn mean_iou_invariant_under_consistent_relabeling() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        let c = 4;
        let gt: Vec<u8> = (0..64).map(|_| rng.gen_range(0..c as u8)).collect();
        let pred: Vec<u8> = (0..64).map(|_| rng.gen_range(0..c as u8)).collect();
        // Permutation keeping background fixed.
        let perm: [u8; 4] = [0, 3, 1, 2];
        let apply = |v: &[u8]| v.iter().map(|&x| perm[x as usize]).collect::<Vec<_>>();

        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(
            &MaskFrame::new(8, 8, gt.clone()).unwrap(),
            &MaskFrame::new(8, 8, pred.clone()).unwrap(),
        )
        .unwrap();
        let mut cm_perm = ConfusionMatrix::new(c);
        cm_perm
            .accumulate(
                &MaskFrame::new(8, 8, apply(&gt)).unwrap(),
                &MaskFrame::new(8, 8, apply(&pred)).unwrap(),
            )
            .unwrap();
        let a = cm.mean_iou(true).unwrap().miou;
        let b = cm_perm.mean_iou(true).unwrap().miou;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn hard_masks_match_soft_iou_complement() {
        // Cross-module oracle: on hard one-hot predictions the soft IoU
        // loss is exactly 1 - confusion-path mean IoU (background in both).
        use crate::losses::{iou_loss_multiclass, one_hot};
        use crate::tensor::GraphTape;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let c = rng.gen_range(2..5usize);
            let n = rng.gen_range(4..40usize);
            let gt: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();

            let mut cm = ConfusionMatrix::new(c);
            for (&a, &p) in gt.iter().zip(&pred) {
                cm.record(a as u8, p as u8).unwrap();
            }
            // Classes absent on both sides are skipped by the confusion
            // path and count as ratio-1 in the soft loss; restrict the
            // comparison to cases where every class appears.
            let summary = match cm.mean_iou(false) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let defined = summary.per_class.iter().filter(|c| c.is_some()).count();

            let mut tape = GraphTape::new();
            let probs = one_hot(&pred, c).unwrap();
            let onehot = one_hot(&gt, c).unwrap();
            let loss = iou_loss_multiclass(&mut tape, &probs, &onehot).unwrap().item().unwrap();
            // Soft mean counts undefined classes as 1; adjust to compare.
            let soft_mean = 1.0 - loss;
            let adjusted = (soft_mean * c as f64 - (c - defined) as f64) / defined as f64;
            assert!(
                (adjusted - summary.miou).abs() < 1e-10,
                "soft {adjusted} vs hard {}",
                summary.miou
            );
        }
    }

    #[test]
    fn profile_of_identical_runs_is_zero() {
        let runs = vec![vec![0.5, 0.6, 0.7], vec![0.4, 0.4, 0.4]];
        let profile = temporal_improvement_profile(&runs, &runs).unwrap();
        assert!(profile.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn profile_matches_published_shape() {
        // Improvement row with frame 1 far below frames 2..5.
        let improvement = [0.113, 0.964, 0.995, 0.950, 0.981];
        let baseline = vec![vec![50.0; 5], vec![52.0; 5]];
        let model: Vec<Vec<f64>> = baseline
            .iter()
            .map(|row| row.iter().zip(improvement).map(|(b, d)| b + d).collect())
            .collect();
        let profile = temporal_improvement_profile(&model, &baseline).unwrap();
        for (p, e) in profile.iter().zip(improvement) {
            assert!((p - e).abs() < 1e-9);
        }
        let tail = profile[1..].iter().sum::<f64>() / 4.0;
        assert!(tail > profile[0]);
    }

    #[test]
    fn profile_rejects_length_mismatch() {
        let a = vec![vec![0.1, 0.2]];
        let b = vec![vec![0.1, 0.2, 0.3]];
        assert!(temporal_improvement_profile(&a, &b).is_err());
    }

    #[test]
    fn identical_groups_not_significant() {
        let a = [0.5, 0.6, 0.7, 0.8];
        let sig = grouped_significance(&a, &a, 0.05).unwrap();
        assert_eq!(sig.p_value, 1.0);
        assert!(!sig.significant);
    }

    #[test]
    fn constant_shift_with_jitter_is_significant() {
        let b: Vec<f64> = (0..10).map(|i| 0.5 + 0.001 * i as f64).collect();
        let a: Vec<f64> = b.iter().enumerate().map(|(i, v)| v + 1.0 + 1e-4 * (i % 3) as f64).collect();
        let sig = grouped_significance(&a, &b, 0.05).unwrap();
        assert!(sig.p_value < 1e-6);
        assert!(sig.significant);
    }

    #[test]
    fn zero_variance_nonzero_mean_reports_zero() {
        let a = [0.7, 0.7, 0.7];
        let b = [0.5, 0.5, 0.5];
        let sig = grouped_significance(&a, &b, 0.05).unwrap();
        assert_eq!(sig.p_value, 0.0);
        assert!(sig.significant);
    }

    #[test]
    fn paired_t_matches_reference_fixture() {
        // Frozen from an independent statistics oracle (paired two-tailed
        // t-test, G = 10, df = 9).
        let a = [0.62, 0.58, 0.71, 0.64, 0.55, 0.69, 0.60, 0.66, 0.63, 0.57];
        let b = [0.60, 0.55, 0.66, 0.61, 0.56, 0.63, 0.58, 0.60, 0.62, 0.52];
        let sig = grouped_significance(&a, &b, 0.05).unwrap();
        assert!((sig.t_stat - 4.400152785735415).abs() < 1e-9);
        assert!((sig.p_value - 0.0017199968516330006).abs() < 1e-6);
        assert!(sig.significant);
    }

    #[test]
    fn grouped_significance_needs_two_groups() {
        assert!(grouped_significance(&[1.0], &[1.0], 0.05).is_err());
    }

    #[test]
    fn subject_report_basics() {
        let results = vec![
            ("s2".to_string(), 0.4),
            ("s1".to_string(), 0.9),
            ("s2".to_string(), 0.6),
        ];
        let report = per_subject_report(&results);
        // Input-stable subject order.
        assert_eq!(report[0].subject, "s2");
        assert_eq!(report[1].subject, "s1");
        assert!((report[0].mean - 0.5).abs() < 1e-12);
        assert!((report[0].std - 0.1).abs() < 1e-12);
        // Single frame: std 0.
        assert_eq!(report[1].std, 0.0);
        assert_eq!(report[1].frames, 1);
    }
}
