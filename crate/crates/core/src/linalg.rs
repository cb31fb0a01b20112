//! Small dense helpers shared by the solvers and certificates.

use nalgebra::{DMatrix, DVector};

/// Minimises `|g0 + sum_k s_k cols[k]|_2` over `s` in the box `bounds` and
/// returns the minimising residual vector.
///
/// A square nonsingular system whose solution lies in the box is solved
/// directly; otherwise cyclic coordinate descent finishes the job.
pub fn box_least_squares_residual(g0: &[f64], cols: &[Vec<f64>], bounds: &[(f64, f64)]) -> Vec<f64> {
    let dim = g0.len();
    let m = cols.len();
    let mut v = g0.to_vec();
    if m == 0 {
        return v;
    }
    let mut s = vec![0.0; m];

    if m == dim {
        let a = DMatrix::from_fn(dim, m, |i, k| cols[k][i]);
        let rhs = DVector::from_iterator(dim, g0.iter().map(|g| -g));
        if let Some(sol) = a.lu().solve(&rhs) {
            let slack = 1e-9;
            let inside = sol.iter().zip(bounds).all(|(&x, &(lo, hi))| {
                x >= lo - slack * (1.0 + lo.abs()) && x <= hi + slack * (1.0 + hi.abs())
            });
            if inside {
                for (k, (&x, &(lo, hi))) in sol.iter().zip(bounds).enumerate() {
                    s[k] = x.clamp(lo, hi);
                }
                v = residual(g0, cols, &s);
                if v.iter().all(|x| x.abs() < 1e-12 * (1.0 + norm_inf(g0))) {
                    return v;
                }
            }
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum()).collect();
    let scale = 1.0 + norm_inf(g0);
    for _sweep in 0..20_000 {
        let mut max_change = 0.0f64;
        for k in 0..m {
            if norms[k] == 0.0 {
                continue;
            }
            let dot: f64 = cols[k].iter().zip(&v).map(|(c, r)| c * r).sum();
            let (lo, hi) = bounds[k];
            let new = (s[k] - dot / norms[k]).clamp(lo, hi);
            let delta = new - s[k];
            if delta != 0.0 {
                for (r, c) in v.iter_mut().zip(&cols[k]) {
                    *r += delta * c;
                }
                s[k] = new;
                max_change = max_change.max(delta.abs() * norms[k].sqrt());
            }
        }
        if max_change <= 1e-15 * scale {
            break;
        }
    }
    residual(g0, cols, &s)
}

fn residual(g0: &[f64], cols: &[Vec<f64>], s: &[f64]) -> Vec<f64> {
    let mut v = g0.to_vec();
    for (c, &sk) in cols.iter().zip(s) {
        if sk != 0.0 {
            for (r, x) in v.iter_mut().zip(c) {
                *r += sk * x;
            }
        }
    }
    v
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn norm1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
