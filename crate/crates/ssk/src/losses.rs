//! Training losses over per-pixel class scores: cross-entropy, the soft
//! multi-class IoU loss, and the weighted positive/negative segmentation
//! loss with intersection/union-derived class weights.
//!
//! Scores arrive as `[K, C]` rows, one row per pixel sample. The hinge
//! and linear sample losses consume raw scores; the IoU loss and the
//! region statistics consume softmax outputs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GraphTape, OpRecord, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Iou,
    Segmentation,
}

/// Which per-sample loss pair backs the segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegVariant {
    /// Categorical-hinge style pair with margin `g`.
    Hinge,
    /// Linear pair: reward the ground-truth score, penalise confident
    /// false positives.
    Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "default_variant")]
    pub variant: SegVariant,
    #[serde(default)]
    pub margin_g: f64,
    #[serde(default = "default_true")]
    pub include_background: bool,
}

fn default_variant() -> SegVariant {
    SegVariant::Linear
}

fn default_true() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::CrossEntropy,
            variant: SegVariant::Linear,
            margin_g: 0.0,
            include_background: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin_g < 0.0 {
            return Err(Error::Config(format!("loss.margin_g must be >= 0, got {}", self.margin_g)));
        }
        Ok(())
    }
}

/// Per-class soft intersection/union and the derived sample weights,
/// treated as constants during differentiation.
#[derive(Clone, Debug)]
pub struct SoftRegionStats {
    pub intersection: Vec<f64>,
    pub union: Vec<f64>,
    pub w_pos: Vec<f64>,
    pub w_neg: Vec<f64>,
}

impl SoftRegionStats {
    pub fn classes(&self) -> usize {
        self.union.len()
    }

    /// Zeroes both weights of one class, removing it from the loss and
    /// its normaliser.
    pub fn exclude_class(&mut self, class: usize) {
        if class < self.w_pos.len() {
            self.w_pos[class] = 0.0;
            self.w_neg[class] = 0.0;
        }
    }
}

fn check_rows(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [k, c] => Ok((*k, *c)),
        other => Err(Error::shape(op, format!("expected [K,C], got {:?}", other))),
    }
}

/// One-hot encodes class indices into a `[K, C]` tensor.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::arg("one_hot", format!("label {} out of range 0..{}", l, classes)));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Mean of `-log softmax(logits)[label]` over the K rows.
pub fn cross_entropy(tape: &mut GraphTape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (k, c) = check_rows("cross_entropy", logits)?;
    if labels.len() != k {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {} rows", labels.len(), k),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::arg("cross_entropy", format!("label {} out of range 0..{}", bad, c)));
    }
    let s = logits.data();
    let mut total = 0.0;
    for row in 0..k {
        let r = &s[row * c..(row + 1) * c];
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = r.iter().map(|v| (v - max).exp()).sum();
        total += denom.ln() - (r[labels[row]] - max);
    }
    let loss = total / k as f64;
    let id = tape.ensure_node(logits);
    Ok(tape.emit(
        vec![loss],
        vec![1],
        &[id],
        OpRecord::CrossEntropy { scores: id, labels: Arc::new(labels.to_vec()), k, c },
    ))
}

fn validate_probs_onehot(op: &'static str, probs: &Tensor, onehot: &Tensor) -> Result<(usize, usize)> {
    let (k, c) = check_rows(op, probs)?;
    if onehot.shape() != [k, c] {
        return Err(Error::shape(
            op,
            format!("probs {:?} vs onehot {:?}", probs.shape(), onehot.shape()),
        ));
    }
    let p = probs.data();
    for row in 0..k {
        let sum: f64 = p[row * c..(row + 1) * c].iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::arg(op, format!("probs row {} sums to {}, not 1", row, sum)));
        }
    }
    let oh = onehot.data();
    for row in 0..k {
        let r = &oh[row * c..(row + 1) * c];
        let ones = r.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || r.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::arg(op, format!("onehot row {} is not a one-hot vector", row)));
        }
    }
    Ok((k, c))
}

fn soft_stats(probs: &[f64], onehot: &[f64], k: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut inter = vec![0.0; c];
    let mut union = vec![0.0; c];
    for row in 0..k {
        for t in 0..c {
            let p = probs[row * c + t];
            let g = onehot[row * c + t];
            inter[t] += p * g;
            union[t] += p + g - p * g;
        }
    }
    (inter, union)
}

/// Soft multi-class IoU loss over the listed classes. A class with zero
/// union contributes ratio 1 (vacuously perfect), so a perfect prediction
/// keeps the loss at exactly 0.
pub fn iou_loss_over_classes(
    tape: &mut GraphTape,
    probs: &Tensor,
    onehot: &Tensor,
    classes: &[usize],
) -> Result<Tensor> {
    let (k, c) = validate_probs_onehot("iou_loss", probs, onehot)?;
    if classes.is_empty() || classes.iter().any(|&t| t >= c) {
        return Err(Error::arg("iou_loss", format!("bad class list {:?} for C={}", classes, c)));
    }
    let (inter, union) = soft_stats(probs.data(), onehot.data(), k, c);
    let mut acc = 0.0;
    for &t in classes {
        acc += if union[t] > 0.0 { inter[t] / union[t] } else { 1.0 };
    }
    let loss = 1.0 - acc / classes.len() as f64;
    let id = tape.ensure_node(probs);
    Ok(tape.emit(
        vec![loss],
        vec![1],
        &[id],
        OpRecord::IouLoss {
            probs: id,
            onehot: Arc::new(onehot.data().to_vec()),
            classes: Arc::new(classes.to_vec()),
            k,
            c,
            inter: Arc::new(inter),
            union: Arc::new(union),
        },
    ))
}

/// Soft multi-class IoU loss over all C classes.
pub fn iou_loss_multiclass(tape: &mut GraphTape, probs: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    let c = check_rows("iou_loss", probs)?.1;
    let classes: Vec<usize> = (0..c).collect();
    iou_loss_over_classes(tape, probs, onehot, &classes)
}

/// Per-class soft intersection/union and the weights `W_p = 1/union`,
/// `W_n = intersection/union^2`. Detached from any tape: no gradient
/// flows through these values. A class absent from both prediction and
/// annotation gets both weights zero.
pub fn compute_soft_region_stats(probs: &Tensor, onehot: &Tensor) -> Result<SoftRegionStats> {
    let (k, c) = validate_probs_onehot("compute_soft_region_stats", probs, onehot)?;
    if k == 0 {
        return Err(Error::arg("compute_soft_region_stats", "empty batch".to_string()));
    }
    let (inter, union) = soft_stats(probs.data(), onehot.data(), k, c);
    if union.iter().all(|&u| u == 0.0) {
        return Err(Error::arg("compute_soft_region_stats", "all class unions are zero".to_string()));
    }
    let mut w_pos = vec![0.0; c];
    let mut w_neg = vec![0.0; c];
    for t in 0..c {
        if union[t] > 0.0 {
            w_pos[t] = 1.0 / union[t];
            w_neg[t] = inter[t] / (union[t] * union[t]);
        }
    }
    Ok(SoftRegionStats { intersection: inter, union, w_pos, w_neg })
}

/// Hinge-style sample losses: `L_p` compares the ground-truth score with
/// the best zero-masked competitor, `L_n` with the score of class `t`.
/// The mask zeroes (rather than removes) the ground-truth entry, so an
/// all-negative competitor row maxes out at 0.
pub fn lp_ln_hinge(scores: &[f64], gt: usize, t: usize, g: f64) -> (f64, f64) {
    let s_gt = scores[gt];
    let masked_max = scores
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == gt { 0.0 } else { v })
        .fold(f64::NEG_INFINITY, f64::max);
    let l_p = (masked_max - s_gt + g).max(0.0);
    let l_n = (scores[t] - s_gt + g).max(0.0);
    (l_p, l_n)
}

/// Linear sample losses: `L_p` rewards the ground-truth score directly;
/// `L_n` charges the class-`t` score unless the ground truth beats it by
/// more than the margin.
pub fn lp_ln_linear(scores: &[f64], gt: usize, t: usize, g: f64) -> (f64, f64) {
    let s_gt = scores[gt];
    let l_p = -s_gt;
    let l_n = if s_gt > scores[t] + g { 0.0 } else { scores[t] };
    (l_p, l_n)
}

/// Weighted segmentation loss over raw scores. `stats` must come from the
/// softmax of the same scores in the same step; weights act as constants,
/// so gradients flow through the scores only. The normaliser is
/// `K * sum_t (W_p^t + W_n^t)`, which makes the loss invariant to a
/// common rescaling of all weights.
pub fn seg_loss(
    tape: &mut GraphTape,
    scores: &Tensor,
    labels: &[usize],
    stats: &SoftRegionStats,
    cfg: &LossConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let (k, c) = check_rows("seg_loss", scores)?;
    if labels.len() != k {
        return Err(Error::shape("seg_loss", format!("{} labels for {} rows", labels.len(), k)));
    }
    if stats.classes() != c {
        return Err(Error::shape(
            "seg_loss",
            format!("stats cover {} classes, scores have {}", stats.classes(), c),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::arg("seg_loss", format!("label {} out of range 0..{}", bad, c)));
    }

    let mut w_pos = stats.w_pos.clone();
    let mut w_neg = stats.w_neg.clone();
    if !cfg.include_background {
        w_pos[0] = 0.0;
        w_neg[0] = 0.0;
    }
    let weight_sum: f64 = w_pos.iter().chain(w_neg.iter()).sum();
    if weight_sum <= 0.0 {
        return Err(Error::arg("seg_loss", "all class weights are zero".to_string()));
    }
    let norm = k as f64 * weight_sum;

    let s = scores.data();
    let g = cfg.margin_g;
    let mut numerator = 0.0;
    for row in 0..k {
        let r = &s[row * c..(row + 1) * c];
        let gt = labels[row];
        for t in 0..c {
            let (l_p, l_n) = match cfg.variant {
                SegVariant::Hinge => lp_ln_hinge(r, gt, t, g),
                SegVariant::Linear => lp_ln_linear(r, gt, t, g),
            };
            if t == gt {
                numerator += w_pos[t] * l_p;
            } else {
                numerator += w_neg[t] * l_n;
            }
        }
    }
    let loss = numerator / norm;

    let id = tape.ensure_node(scores);
    Ok(tape.emit(
        vec![loss],
        vec![1],
        &[id],
        OpRecord::SegLoss {
            scores: id,
            labels: Arc::new(labels.to_vec()),
            k,
            c,
            variant: cfg.variant,
            margin: g,
            w_pos: Arc::new(w_pos),
            w_neg: Arc::new(w_neg),
            norm,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, ops};

    const PAPER_ROW: [f64; 3] = [-1.2, 2.9, 7.1];

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut tape = GraphTape::new();
        let logits = Tensor::new(vec![1, 5], vec![0.3; 5]).unwrap();
        let loss = cross_entropy(&mut tape, &logits, &[2]).unwrap();
        assert!((loss.item().unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_peaked_is_near_zero() {
        let mut tape = GraphTape::new();
        let logits = Tensor::new(vec![1, 3], vec![-1e3, 1e3, -1e3]).unwrap();
        let loss = cross_entropy(&mut tape, &logits, &[1]).unwrap();
        assert!(loss.item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_paper_row() {
        let mut tape = GraphTape::new();
        let logits = Tensor::new(vec![1, 3], PAPER_ROW.to_vec()).unwrap();
        let loss = cross_entropy(&mut tape, &logits, &[2]).unwrap();
        // -ln softmax[2]; oracle value from direct exp-normalise evaluation.
        assert!((loss.item().unwrap() - 0.015129069933844266).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = GraphTape::new();
        let logits = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(cross_entropy(&mut tape, &logits, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let report = finite_diff_check(
            |tape, params| cross_entropy(tape, &params[0], &[2, 0]),
            &[("logits", Tensor::new(vec![2, 3], vec![-1.2, 2.9, 7.1, 0.4, -0.3, 0.1]).unwrap())],
            1e-4,
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(report.pass(), "{report}");
    }

    #[test]
    fn iou_loss_perfect_prediction_is_zero() {
        let mut tape = GraphTape::new();
        let onehot = one_hot(&[0, 1, 2, 1], 3).unwrap();
        let loss = iou_loss_multiclass(&mut tape, &onehot, &onehot).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn iou_loss_two_sample_fixture() {
        let mut tape = GraphTape::new();
        let probs = Tensor::new(vec![2, 2], vec![0.8, 0.2, 0.4, 0.6]).unwrap();
        let onehot = one_hot(&[0, 1], 2).unwrap();
        let loss = iou_loss_multiclass(&mut tape, &probs, &onehot).unwrap();
        assert!((loss.item().unwrap() - 0.4642857142857142).abs() < 1e-12);
    }

    #[test]
    fn iou_loss_uniform_balanced_two_thirds() {
        let mut tape = GraphTape::new();
        let probs = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap();
        let onehot = one_hot(&[0, 1], 2).unwrap();
        let loss = iou_loss_multiclass(&mut tape, &probs, &onehot).unwrap();
        assert!((loss.item().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_loss_rejects_unnormalised_rows() {
        let mut tape = GraphTape::new();
        let probs = Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap();
        let onehot = one_hot(&[0], 2).unwrap();
        assert!(iou_loss_multiclass(&mut tape, &probs, &onehot).is_err());
    }

    #[test]
    fn iou_loss_bounded_and_zero_only_when_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let k = rng.gen_range(1..6);
            let c = rng.gen_range(2..5);
            let labels: Vec<usize> = (0..k).map(|_| rng.gen_range(0..c)).collect();
            let mut probs = vec![0.0; k * c];
            for row in 0..k {
                let mut sum = 0.0;
                for t in 0..c {
                    let v: f64 = rng.gen_range(0.01..1.0);
                    probs[row * c + t] = v;
                    sum += v;
                }
                for t in 0..c {
                    probs[row * c + t] /= sum;
                }
            }
            let mut tape = GraphTape::new();
            let p = Tensor::new(vec![k, c], probs).unwrap();
            let oh = one_hot(&labels, c).unwrap();
            let loss = iou_loss_multiclass(&mut tape, &p, &oh).unwrap().item().unwrap();
            assert!((0.0..=1.0).contains(&loss));
            // Soft probs never hit the one-hot exactly here.
            assert!(loss > 0.0);
        }
    }

    #[test]
    fn iou_gradient_through_softmax_matches_finite_differences() {
        let onehot = one_hot(&[0, 1, 1, 2], 3).unwrap();
        let report = finite_diff_check(
            move |tape, params| {
                let as_maps = ops::reshape(tape, &params[0], vec![1, 3, 2, 2])?;
                let probs = ops::softmax_channels(tape, &as_maps)?;
                let rows = ops::flatten_samples(tape, &probs)?;
                iou_loss_multiclass(tape, &rows, &onehot)
            },
            &[("scores", Tensor::new(vec![4, 3], vec![0.3, -0.2, 0.9, 1.1, 0.0, -0.4, 0.2, 0.5, -0.8, 0.1, 0.6, 0.3]).unwrap())],
            1e-4,
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(report.pass(), "{report}");
    }

    #[test]
    fn soft_region_stats_fixture() {
        let probs = Tensor::new(vec![2, 2], vec![0.8, 0.2, 0.4, 0.6]).unwrap();
        let onehot = one_hot(&[0, 1], 2).unwrap();
        let stats = compute_soft_region_stats(&probs, &onehot).unwrap();
        assert!((stats.intersection[0] - 0.8).abs() < 1e-12);
        assert!((stats.union[0] - 1.4).abs() < 1e-12);
        assert!((stats.w_pos[0] - 0.7142857142857143).abs() < 1e-9);
        assert!((stats.w_neg[0] - 0.4081632653061225).abs() < 1e-9);
    }

    #[test]
    fn soft_region_stats_perfect_prediction() {
        let onehot = one_hot(&[0, 0, 1], 2).unwrap();
        let stats = compute_soft_region_stats(&onehot, &onehot).unwrap();
        // g_t = f_t = class count, so both weights are 1/count.
        assert!((stats.w_pos[0] - 0.5).abs() < 1e-12);
        assert!((stats.w_neg[0] - 0.5).abs() < 1e-12);
        assert!((stats.w_pos[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_region_stats_degenerate_class_gets_zero_weights() {
        // Class 2 absent from annotation and never predicted.
        let probs = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let onehot = one_hot(&[0, 1], 3).unwrap();
        let stats = compute_soft_region_stats(&probs, &onehot).unwrap();
        assert_eq!(stats.w_pos[2], 0.0);
        assert_eq!(stats.w_neg[2], 0.0);
    }

    #[test]
    fn soft_region_stats_monotone_w_neg_for_equal_union() {
        // Classes 0 and 1 have equal unions but different intersections
        // (a third class absorbs the difference in mass).
        let probs = Tensor::new(
            vec![2, 3],
            vec![0.9, 0.05, 0.05, 0.05, 0.55, 0.40],
        )
        .unwrap();
        let onehot = one_hot(&[0, 1], 3).unwrap();
        let stats = compute_soft_region_stats(&probs, &onehot).unwrap();
        assert!((stats.union[0] - stats.union[1]).abs() < 1e-12);
        assert!(stats.intersection[0] > stats.intersection[1]);
        assert!(stats.w_neg[0] > stats.w_neg[1]);
    }

    #[test]
    fn hinge_fixtures_from_paper_row() {
        let (l_p, _) = lp_ln_hinge(&PAPER_ROW, 1, 1, 1.0);
        assert!((l_p - 5.2).abs() < 1e-12);
        let (_, l_n) = lp_ln_hinge(&PAPER_ROW, 1, 2, 1.0);
        assert!((l_n - 5.2).abs() < 1e-12);
        // Correct by a margin wider than g: both go inactive.
        let (l_p, l_n) = lp_ln_hinge(&[0.1, 5.0, 0.3], 1, 2, 1.0);
        assert_eq!(l_p, 0.0);
        assert_eq!(l_n, 0.0);
    }

    #[test]
    fn linear_fixtures_from_paper_row() {
        let (l_p, _) = lp_ln_linear(&PAPER_ROW, 1, 1, 0.0);
        assert!((l_p + 2.9).abs() < 1e-12);
        let (_, l_n) = lp_ln_linear(&PAPER_ROW, 1, 2, 0.0);
        assert!((l_n - 7.1).abs() < 1e-12);
        let (_, l_n) = lp_ln_linear(&[9.0, 1.0, 0.5], 0, 1, 2.0);
        assert_eq!(l_n, 0.0);
    }

    fn hand_stats(w_pos: Vec<f64>, w_neg: Vec<f64>) -> SoftRegionStats {
        SoftRegionStats { intersection: vec![0.0; w_pos.len()], union: vec![1.0; w_pos.len()], w_pos, w_neg }
    }

    #[test]
    fn seg_loss_single_sample_hand_computation() {
        let mut tape = GraphTape::new();
        let scores = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let stats = hand_stats(vec![0.7, 0.5], vec![0.3, 0.2]);
        let cfg = LossConfig {
            kind: LossKind::Segmentation,
            variant: SegVariant::Linear,
            margin_g: 0.0,
            include_background: true,
        };
        let loss = seg_loss(&mut tape, &scores, &[0], &stats, &cfg).unwrap();
        // numerator = W_p[0] * (-2.0) + W_n[1] * 0 = -1.4
        // norm = 1 * (0.7 + 0.5 + 0.3 + 0.2) = 1.7
        assert!((loss.item().unwrap() - (-1.4 / 1.7)).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_linear_all_correct_is_negative() {
        let mut tape = GraphTape::new();
        // Every row scores its own class strictly highest with wide margin.
        let scores = Tensor::new(vec![2, 2], vec![4.0, -3.0, -5.0, 6.0]).unwrap();
        let stats = hand_stats(vec![0.5, 0.5], vec![0.1, 0.1]);
        let cfg = LossConfig {
            kind: LossKind::Segmentation,
            variant: SegVariant::Linear,
            margin_g: 0.0,
            include_background: true,
        };
        let loss = seg_loss(&mut tape, &scores, &[0, 1], &stats, &cfg).unwrap();
        assert!(loss.item().unwrap() < 0.0);
    }

    #[test]
    fn seg_loss_invariant_to_weight_rescaling() {
        let scores = Tensor::new(vec![2, 3], vec![0.2, 1.4, -0.7, 2.0, 0.1, 0.4]).unwrap();
        let cfg = LossConfig {
            kind: LossKind::Segmentation,
            variant: SegVariant::Hinge,
            margin_g: 1.0,
            include_background: true,
        };
        let stats1 = hand_stats(vec![0.4, 0.3, 0.2], vec![0.15, 0.1, 0.05]);
        let stats2 = hand_stats(vec![0.8, 0.6, 0.4], vec![0.3, 0.2, 0.1]);
        let mut tape = GraphTape::new();
        let a = seg_loss(&mut tape, &scores, &[1, 0], &stats1, &cfg).unwrap();
        let b = seg_loss(&mut tape, &scores, &[1, 0], &stats2, &cfg).unwrap();
        assert!((a.item().unwrap() - b.item().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_hinge_saturates_for_confident_rows() {
        // GT score beats every competitor by more than g: zero contribution.
        let mut tape = GraphTape::new();
        let scores = Tensor::new(vec![1, 3], vec![5.0, 1.0, 0.0]).unwrap();
        let stats = hand_stats(vec![0.3; 3], vec![0.2; 3]);
        let cfg = LossConfig {
            kind: LossKind::Segmentation,
            variant: SegVariant::Hinge,
            margin_g: 1.0,
            include_background: true,
        };
        let loss = seg_loss(&mut tape, &scores, &[0], &stats, &cfg).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn seg_loss_gradients_match_finite_differences() {
        // Random-ish scores away from hinge kinks; stats held fixed.
        let scores = Tensor::new(
            vec![3, 3],
            vec![0.31, 1.42, -0.73, 2.05, 0.11, 0.44, -0.58, 0.93, 1.77],
        )
        .unwrap();
        let labels = vec![1usize, 0, 2];
        let stats = hand_stats(vec![0.41, 0.33, 0.27], vec![0.12, 0.21, 0.08]);
        for variant in [SegVariant::Hinge, SegVariant::Linear] {
            let cfg = LossConfig {
                kind: LossKind::Segmentation,
                variant,
                margin_g: 0.35,
                include_background: true,
            };
            let stats = stats.clone();
            let labels = labels.clone();
            let report = finite_diff_check(
                move |tape, params| seg_loss(tape, &params[0], &labels, &stats, &cfg),
                &[("scores", scores.clone())],
                1e-4,
                1e-3,
                None,
                0,
            )
            .unwrap();
            assert!(report.pass(), "{variant:?}: {report}");
        }
    }

    #[test]
    fn seg_loss_background_exclusion_drops_class_zero() {
        let scores = Tensor::new(vec![2, 2], vec![1.0, 0.2, -0.4, 0.9]).unwrap();
        let stats = hand_stats(vec![0.5, 0.5], vec![0.2, 0.2]);
        let mut cfg = LossConfig {
            kind: LossKind::Segmentation,
            variant: SegVariant::Linear,
            margin_g: 0.0,
            include_background: false,
        };
        let mut tape = GraphTape::new();
        let excl = seg_loss(&mut tape, &scores, &[0, 1], &stats, &cfg).unwrap();
        // Same computation done by hand with class 0 removed:
        // row 0 (gt=0): positive term dropped; L_n for t=1: gt 1.0 > 0.2 -> 0
        // row 1 (gt=1): W_p[1] * (-0.9); no negative classes left with weight.
        // norm = 2 * (0.5 + 0.2) = 1.4
        assert!((excl.item().unwrap() - (-0.9 * 0.5 / 1.4)).abs() < 1e-12);
        cfg.include_background = true;
        let incl = seg_loss(&mut tape, &scores, &[0, 1], &stats, &cfg).unwrap();
        assert!(excl.item().unwrap() != incl.item().unwrap());
    }
}
