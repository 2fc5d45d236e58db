//! Closed cubic splines with relaxed continuity at marked corner points,
//! used to turn sparse landmark contours into dense polygons.

use crate::error::{Error, Result};

/// Dense closed polyline through `points` (first output point repeated at
/// the end). Without corners this is a periodic natural cubic spline with
/// uniform knots. Corner indices split the loop into independent natural
/// splines that share only the corner vertex, so tangent continuity is
/// relaxed there; marking every point degenerates to the polygon itself.
///
/// Consecutive duplicate points are dropped with a warning.
pub fn closed_cubic_spline(
    points: &[(f64, f64)],
    corner_indices: &[usize],
    samples_per_segment: usize,
) -> Result<Vec<(f64, f64)>> {
    if samples_per_segment == 0 {
        return Err(Error::arg("closed_cubic_spline", "samples_per_segment must be >= 1".to_string()));
    }
    for &c in corner_indices {
        if c >= points.len() {
            return Err(Error::arg(
                "closed_cubic_spline",
                format!("corner index {} out of range for {} points", c, points.len()),
            ));
        }
    }

    // Deduplicate consecutive points (with wrap-around), remapping corners.
    let mut dedup: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    let mut corner_set: Vec<bool> = Vec::with_capacity(points.len());
    let mut dropped = 0;
    for (i, &p) in points.iter().enumerate() {
        let is_corner = corner_indices.contains(&i);
        if let Some(&last) = dedup.last() {
            if last == p {
                dropped += 1;
                if is_corner {
                    *corner_set.last_mut().unwrap() = true;
                }
                continue;
            }
        }
        dedup.push(p);
        corner_set.push(is_corner);
    }
    if dedup.len() > 1 && dedup.first() == dedup.last() {
        dedup.pop();
        let c = corner_set.pop().unwrap();
        if c {
            corner_set[0] = true;
        }
        dropped += 1;
    }
    if dropped > 0 {
        log::warn!("closed_cubic_spline: dropped {dropped} duplicate consecutive point(s)");
    }
    let n = dedup.len();
    if n < 3 {
        return Err(Error::arg(
            "closed_cubic_spline",
            format!("need at least 3 distinct points, got {}", n),
        ));
    }

    let corners: Vec<usize> =
        (0..n).filter(|&i| corner_set[i]).collect();

    let xs: Vec<f64> = dedup.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = dedup.iter().map(|p| p.1).collect();

    let mut out: Vec<(f64, f64)> = Vec::with_capacity(n * samples_per_segment + 1);
    if corners.is_empty() {
        let mx = periodic_second_derivatives(&xs);
        let my = periodic_second_derivatives(&ys);
        for i in 0..n {
            let j = (i + 1) % n;
            for s in 0..samples_per_segment {
                let t = s as f64 / samples_per_segment as f64;
                out.push((
                    eval_segment(xs[i], xs[j], mx[i], mx[j], t),
                    eval_segment(ys[i], ys[j], my[i], my[j], t),
                ));
            }
        }
    } else {
        // Arcs run corner-to-corner around the loop; each is an open
        // natural spline over its own points.
        for (k, &start) in corners.iter().enumerate() {
            let end = corners[(k + 1) % corners.len()];
            // Walk forward from one corner to the next; a single corner
            // wraps the whole loop back onto itself.
            let mut arc: Vec<usize> = vec![start];
            let mut i = start;
            loop {
                i = (i + 1) % n;
                arc.push(i);
                if i == end || arc.len() > n {
                    break;
                }
            }
            let ax: Vec<f64> = arc.iter().map(|&i| xs[i]).collect();
            let ay: Vec<f64> = arc.iter().map(|&i| ys[i]).collect();
            let mx = natural_second_derivatives(&ax);
            let my = natural_second_derivatives(&ay);
            for i in 0..arc.len() - 1 {
                for s in 0..samples_per_segment {
                    let t = s as f64 / samples_per_segment as f64;
                    out.push((
                        eval_segment(ax[i], ax[i + 1], mx[i], mx[i + 1], t),
                        eval_segment(ay[i], ay[i + 1], my[i], my[i + 1], t),
                    ));
                }
            }
        }
    }
    let first = out[0];
    out.push(first);
    Ok(out)
}

fn eval_segment(y0: f64, y1: f64, m0: f64, m1: f64, t: f64) -> f64 {
    let u = 1.0 - t;
    m0 / 6.0 * (u * u * u - u) + m1 / 6.0 * (t * t * t - t) + y0 * u + y1 * t
}

/// Second derivatives of the periodic natural spline with unit knots:
/// cyclic system `M[i-1] + 4 M[i] + M[i+1] = 6 (y[i-1] - 2y[i] + y[i+1])`.
fn periodic_second_derivatives(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut a = vec![0.0; n * n];
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        a[i * n + (i + n - 1) % n] += 1.0;
        a[i * n + i] += 4.0;
        a[i * n + (i + 1) % n] += 1.0;
        rhs[i] = 6.0 * (y[(i + n - 1) % n] - 2.0 * y[i] + y[(i + 1) % n]);
    }
    solve_dense(&mut a, &mut rhs, n);
    rhs
}

/// Second derivatives of the open natural spline (`M = 0` at both ends).
fn natural_second_derivatives(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    if n <= 2 {
        return vec![0.0; n];
    }
    let mut a = vec![0.0; n * n];
    let mut rhs = vec![0.0; n];
    a[0] = 1.0;
    a[(n - 1) * n + n - 1] = 1.0;
    for i in 1..n - 1 {
        a[i * n + i - 1] = 1.0;
        a[i * n + i] = 4.0;
        a[i * n + i + 1] = 1.0;
        rhs[i] = 6.0 * (y[i - 1] - 2.0 * y[i] + y[i + 1]);
    }
    solve_dense(&mut a, &mut rhs, n);
    rhs
}

/// In-place Gaussian elimination with partial pivoting; the systems here
/// are at most the landmark count, so dense is fine.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) {
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut sum = b[col];
        for k in col + 1..n {
            sum -= a[col * n + k] * b[k];
        }
        b[col] = sum / a[col * n + col];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_corner_square_degenerates_to_polygon() {
        let square = [(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)];
        let poly = closed_cubic_spline(&square, &[0, 1, 2, 3], 4).unwrap();
        // Every sampled point must lie on an axis-aligned edge of the square.
        for &(x, y) in &poly {
            let on_edge = (x - 0.0).abs() < 1e-9
                || (x - 4.0).abs() < 1e-9
                || (y - 0.0).abs() < 1e-9
                || (y - 4.0).abs() < 1e-9;
            assert!(on_edge, "({x},{y}) strays off the square");
        }
        assert_eq!(poly.first(), poly.last());
    }

    #[test]
    fn circle_points_stay_within_one_percent() {
        let n = 8;
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .collect();
        let poly = closed_cubic_spline(&pts, &[], 8).unwrap();
        let max_dev = poly
            .iter()
            .map(|&(x, y)| ((x * x + y * y).sqrt() - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 0.01, "max radial deviation {max_dev}");
    }

    #[test]
    fn output_is_closed() {
        let pts = [(0.0, 0.0), (2.0, 1.0), (1.0, 3.0), (-1.0, 2.0)];
        let poly = closed_cubic_spline(&pts, &[1], 6).unwrap();
        assert_eq!(poly.first(), poly.last());
    }

    #[test]
    fn consecutive_duplicates_are_dropped() {
        let pts = [(0.0, 0.0), (0.0, 0.0), (2.0, 0.0), (1.0, 2.0)];
        let poly = closed_cubic_spline(&pts, &[], 2).unwrap();
        assert_eq!(poly.len(), 3 * 2 + 1);
    }

    #[test]
    fn too_few_distinct_points_rejected() {
        let pts = [(0.0, 0.0), (0.0, 0.0), (1.0, 1.0)];
        assert!(closed_cubic_spline(&pts, &[], 4).is_err());
    }

    #[test]
    fn spline_interpolates_the_input_points() {
        let pts = [(0.0, 0.0), (3.0, 0.5), (4.0, 3.0), (1.5, 4.0), (-0.5, 2.0)];
        let poly = closed_cubic_spline(&pts, &[], 5).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let got = poly[i * 5];
            assert!((got.0 - p.0).abs() < 1e-9 && (got.1 - p.1).abs() < 1e-9);
        }
    }
}
