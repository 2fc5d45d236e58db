//! Central finite-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{GraphTape, Tensor};

/// Outcome for a single checked parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// max over checked coordinates of |analytic - numeric| / max(|analytic|, |numeric|, floor)
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
    /// Set when the objective evaluated to a non-finite value; the check
    /// is reported failed instead of crashing.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        !self.non_finite && self.params.iter().all(|p| p.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.non_finite {
            writeln!(f, "FAIL: objective is non-finite")?;
        }
        for p in &self.params {
            writeln!(
                f,
                "{} {:<28} max rel err {:.3e} ({} coords)",
                if p.pass { "pass" } else { "FAIL" },
                p.name,
                p.max_rel_err,
                p.coords_checked
            )?;
        }
        write!(f, "overall: {} (eps {:.1e}, tol {:.1e})", if self.pass() { "pass" } else { "FAIL" }, self.eps, self.tol)
    }
}

/// Coordinates with gradient magnitude below this floor are compared in
/// absolute rather than relative terms.
const DENOM_FLOOR: f64 = 1e-3;

/// Compares tape gradients of a scalar objective against central finite
/// differences, perturbing each parameter coordinate by `+-eps`.
///
/// `f` must be a deterministic function of the supplied tensors. When
/// `max_coords` is set, at most that many seeded-random coordinates are
/// checked per parameter.
pub fn finite_diff_check<F>(
    f: F,
    params: &[(&str, Tensor)],
    eps: f64,
    tol: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut GraphTape, &[Tensor]) -> Result<Tensor>,
{
    let mut report = GradCheckReport { eps, tol, params: Vec::new(), non_finite: false };

    // Analytic pass.
    let mut tape = GraphTape::new();
    let tracked: Vec<Tensor> = params.iter().map(|(_, t)| tape.leaf(t, true)).collect();
    let loss = f(&mut tape, &tracked)?;
    if !loss.item()?.is_finite() {
        report.non_finite = true;
        return Ok(report);
    }
    let grads = tape.backward(&loss)?;

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = GraphTape::new();
        f(&mut tape, vals)?.item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (pi, (name, param)) in params.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(&tracked[pi]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; param.numel()],
        };
        let mut coords: Vec<usize> = (0..param.numel()).collect();
        if let Some(limit) = max_coords {
            if coords.len() > limit {
                coords.shuffle(&mut rng);
                coords.truncate(limit);
                coords.sort_unstable();
            }
        }

        let mut max_rel = 0.0f64;
        for &ci in &coords {
            let base = param.data()[ci];
            let mut plus: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
            plus[pi].data_mut()[ci] = base + eps;
            let mut minus: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
            minus[pi].data_mut()[ci] = base - eps;
            let (fp, fm) = (eval(&plus)?, eval(&minus)?);
            if !fp.is_finite() || !fm.is_finite() {
                report.non_finite = true;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            max_rel = max_rel.max(rel);
        }
        report.params.push(ParamCheck {
            name: name.to_string(),
            max_rel_err: max_rel,
            coords_checked: coords.len(),
            pass: max_rel < tol,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::new(vec![4], vec![0.3, -0.7, 1.1, 0.0]).unwrap();
        let x = Tensor::new(vec![4], vec![2.0, -1.0, 0.5, 3.0]).unwrap();
        let report = finite_diff_check(
            move |tape, params| {
                let p = ops::mul(tape, &params[0], &x)?;
                Ok(ops::sum_all(tape, &p))
            },
            &[("w", w)],
            1e-4,
            1e-9,
            None,
            0,
        )
        .unwrap();
        assert!(report.pass(), "{report}");
    }

    #[test]
    fn conv_sigmoid_composite_passes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let input = Tensor::new(vec![1, 2, 5, 5], (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let weight = Tensor::new(vec![3, 2, 3, 3], (0..54).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let bias = Tensor::new(vec![3], vec![0.1, -0.2, 0.05]).unwrap();
        let report = finite_diff_check(
            move |tape, params| {
                let y = ops::conv2d(tape, &input, &params[0], Some(&params[1]), 1, 1, ops::Padding::Same)?;
                let s = ops::sigmoid(tape, &y);
                Ok(ops::mean_all(tape, &s))
            },
            &[("weight", weight), ("bias", bias)],
            1e-4,
            1e-4,
            None,
            0,
        )
        .unwrap();
        assert!(report.pass(), "{report}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        // Objective w^2 has gradient 2w; a deliberately wrong graph that
        // computes 3w * w in a way the tape differentiates as d(3w*w)= ...
        // would still be consistent, so instead corrupt by comparing against
        // an objective whose forward and declared params disagree.
        let w = Tensor::new(vec![1], vec![0.7]).unwrap();
        let report = finite_diff_check(
            |tape, params| {
                // Forward uses a detached copy for half the computation:
                // the tape's gradient misses that contribution.
                let detached = Tensor::new(vec![1], vec![params[0].data()[0]]).unwrap();
                let a = ops::mul(tape, &params[0], &detached)?;
                Ok(ops::sum_all(tape, &a))
            },
            &[("w", w)],
            1e-4,
            1e-3,
            None,
            0,
        )
        .unwrap();
        assert!(!report.pass(), "negative control must fail: {report}");
    }

    #[test]
    fn non_finite_objective_is_reported_not_crashed() {
        let w = Tensor::new(vec![1], vec![2.0]).unwrap();
        let report = finite_diff_check(
            |tape, params| {
                let huge = ops::scale(tape, &params[0], f64::INFINITY);
                Ok(ops::sum_all(tape, &huge))
            },
            &[("w", w)],
            1e-4,
            1e-3,
            None,
            0,
        )
        .unwrap();
        assert!(report.non_finite);
        assert!(!report.pass());
    }
}
