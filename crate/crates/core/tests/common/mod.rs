//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use eslasso::features::DesignMatrix;
use nalgebra::{DMatrix, DVector};

/// `T_k(x)` by the three-term recurrence.
pub fn chebyshev_recurrence(k: u32, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if k == 0 {
        return 1.0;
    }
    for _ in 1..k {
        let next = 2.0 * x * cur - prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// ES LASSO objective in quadratic form, cheap to evaluate many times.
pub struct Quadratic {
    pub gram: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
    pub t: f64,
    pub weights: Vec<f64>,
}

impl Quadratic {
    pub fn new(x: &DesignMatrix, y: &[f64], lambda: f64) -> Self {
        let v = x.values();
        let yv = DVector::from_column_slice(y);
        Self {
            gram: v.transpose() * v,
            xty: v.transpose() * &yv,
            yty: yv.dot(&yv),
            t: y.len() as f64,
            weights: x.scales().iter().map(|s| lambda * s).collect(),
        }
    }

    pub fn value(&self, g: &[f64]) -> f64 {
        let p = g.len();
        let mut quad = 0.0;
        for i in 0..p {
            for j in 0..p {
                quad += g[i] * self.gram[(i, j)] * g[j];
            }
        }
        let lin: f64 = (0..p).map(|i| g[i] * self.xty[i]).sum();
        let pen: f64 = (0..p).map(|i| self.weights[i] * g[i].abs()).sum();
        (self.yty - 2.0 * lin + quad) / self.t + pen
    }

    /// Exact minimum by enumerating sign patterns in `{-1, 0, 1}^p`.
    pub fn enumerate(&self) -> (Vec<f64>, f64) {
        let p = self.xty.len();
        let mut best = (vec![0.0; p], self.value(&vec![0.0; p]));
        for code in 0..3usize.pow(p as u32) {
            let signs: Vec<i32> = (0..p).map(|i| (code / 3usize.pow(i as u32) % 3) as i32 - 1).collect();
            let active: Vec<usize> = (0..p).filter(|&i| signs[i] != 0).collect();
            if active.is_empty() {
                continue;
            }
            let m = active.len();
            let a = DMatrix::from_fn(m, m, |r, c| 2.0 * self.gram[(active[r], active[c])] / self.t);
            let b = DVector::from_fn(m, |r, _| {
                2.0 * self.xty[active[r]] / self.t - self.weights[active[r]] * f64::from(signs[active[r]])
            });
            let Some(sol) = a.lu().solve(&b) else { continue };
            let mut g = vec![0.0; p];
            let mut consistent = true;
            for (r, &i) in active.iter().enumerate() {
                if sol[r] * f64::from(signs[i]) <= 0.0 {
                    consistent = false;
                }
                g[i] = sol[r];
            }
            if consistent {
                let v = self.value(&g);
                if v < best.1 {
                    best = (g, v);
                }
            }
        }
        best
    }

    /// Grid search on a box that is repeatedly shrunk around the best point.
    pub fn grid_search(&self, radius: f64, points: usize, zooms: usize) -> (Vec<f64>, f64) {
        let p = self.xty.len();
        let mut center = vec![0.0; p];
        let mut best = (center.clone(), self.value(&center));
        let mut r = radius;
        let mut g = vec![0.0; p];
        for _ in 0..zooms {
            let step = 2.0 * r / (points - 1) as f64;
            for code in 0..points.pow(p as u32) {
                for (i, gi) in g.iter_mut().enumerate() {
                    let idx = code / points.pow(i as u32) % points;
                    *gi = center[i] - r + step * idx as f64;
                }
                let v = self.value(&g);
                if v < best.1 {
                    best = (g.clone(), v);
                }
            }
            center = best.0.clone();
            r /= 4.0;
        }
        best
    }
}

/// Exact minimum of the penalized check-loss problem: the optimum sits where
/// `p` linearly independent kinks are active, either fitted observations
/// `y_t = x_t'a` or zero coefficients `a_i = 0`.
pub fn quantile_vertex_oracle(x: &DesignMatrix, y: &[f64], tau: f64, nu: f64) -> f64 {
    let v = x.values();
    let (t, p) = (v.nrows(), v.ncols());
    let mut rows: Vec<(Vec<f64>, f64)> = (0..t).map(|i| (v.row(i).iter().copied().collect(), y[i])).collect();
    for i in 0..p {
        let mut e = vec![0.0; p];
        e[i] = 1.0;
        rows.push((e, 0.0));
    }
    let objective = |a: &[f64]| -> f64 {
        let loss: f64 = (0..t)
            .map(|i| {
                let r = y[i] - (0..p).map(|j| v[(i, j)] * a[j]).sum::<f64>();
                r * (tau - if r < 0.0 { 1.0 } else { 0.0 })
            })
            .sum();
        loss + nu * a.iter().zip(x.scales()).map(|(c, s)| c.abs() * s).sum::<f64>()
    };
    let mut best = f64::INFINITY;
    let mut choose = vec![0usize; p];
    fn rec(
        start: usize,
        depth: usize,
        choose: &mut Vec<usize>,
        rows: &[(Vec<f64>, f64)],
        best: &mut f64,
        objective: &dyn Fn(&[f64]) -> f64,
    ) {
        let p = choose.len();
        if depth == p {
            let a = DMatrix::from_fn(p, p, |r, c| rows[choose[r]].0[c]);
            let b = DVector::from_fn(p, |r, _| rows[choose[r]].1);
            if a.determinant().abs() < 1e-10 {
                return;
            }
            if let Some(sol) = a.lu().solve(&b) {
                let val = objective(sol.as_slice());
                if val < *best {
                    *best = val;
                }
            }
            return;
        }
        for i in start..rows.len() {
            choose[depth] = i;
            rec(i + 1, depth + 1, choose, rows, best, objective);
        }
    }
    rec(0, 0, &mut choose, &rows, &mut best, &objective);
    best
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + h * i as f64);
    }
    s * h / 3.0
}

/// Deterministic design with an intercept and `p - 1` standard normal columns.
pub fn random_design(rng: &mut impl rand::Rng, t: usize, p: usize) -> DesignMatrix {
    use rand_distr::{Distribution, StandardNormal};
    let raw = DMatrix::from_fn(t, p - 1, |_, _| StandardNormal.sample(rng));
    DesignMatrix::with_intercept(&raw).unwrap()
}
