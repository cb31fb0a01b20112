//! Weighted-l1 penalized quantile regression.
//!
//! Minimises
//!
//! ```text
//! sum_t rho_tau(Y_t - X_t'a) + nu * sum_i sigma_i |a_i|
//! ```
//!
//! with `rho_tau(r) = (tau - 1{r < 0}) r`. The penalty is folded into the loss
//! as `p` extra rows `(e_i, 0)` carrying the symmetric loss `nu sigma_i |r|`,
//! which turns the problem into a piecewise-linear regression on `T + p` rows.
//! The solver walks between vertices of that problem (each vertex interpolates
//! `p` rows exactly), following the edge with the most negative directional
//! derivative and doing an exact line search over the kinks along it.
//!
//! Optimality is checked independently by [`quantile_certificate`].

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DesignMatrix;
use crate::linalg;

/// Check (tick) loss `(tau - 1{r < 0}) r`.
#[inline]
pub fn check_loss(tau: f64, residual: f64) -> f64 {
    if residual < 0.0 {
        (tau - 1.0) * residual
    } else {
        tau * residual
    }
}

fn validate_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "quantile level must lie in (0, 1), got {tau}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileFit {
    pub coefficients: Vec<f64>,
    pub tau: f64,
    pub penalty: f64,
    pub objective: f64,
    pub certificate: f64,
    pub iterations: usize,
}

impl QuantileFit {
    pub fn predict(&self, x: &DesignMatrix) -> Result<Vec<f64>> {
        predict_quantile(self, x)
    }
}

/// `X_new a`.
pub fn predict_quantile(fit: &QuantileFit, x_new: &DesignMatrix) -> Result<Vec<f64>> {
    x_new.apply(&fit.coefficients)
}

/// Penalized objective evaluated from scratch.
pub fn quantile_objective(x: &DesignMatrix, y: &[f64], tau: f64, nu: f64, coef: &[f64]) -> Result<f64> {
    let fitted = x.apply(coef)?;
    let loss: f64 = y
        .iter()
        .zip(&fitted)
        .map(|(yt, ft)| check_loss(tau, yt - ft))
        .sum();
    Ok(loss + nu * x.weighted_l1(coef))
}

/// Smallest penalty at which `a = 0` is optimal.
pub fn nu_max(x: &DesignMatrix, y: &[f64], tau: f64) -> f64 {
    let psi: Vec<f64> = y.iter().map(|&v| if v < 0.0 { tau - 1.0 } else { tau }).collect();
    x.values()
        .column_iter()
        .zip(x.scales())
        .filter(|(_, &s)| s > 0.0)
        .map(|(col, &s)| {
            let g: f64 = col.iter().zip(&psi).map(|(a, b)| a * b).sum();
            g.abs() / s
        })
        .fold(0.0, f64::max)
}

/// Distance from zero to the subdifferential of the penalized objective at
/// `fit.coefficients`, in the sup norm, divided by `T`.
///
/// Residuals with `|r| <= 1e-9 (1 + |Y|_inf)` are treated as zero and get the
/// interval subgradient `[tau - 1, tau]`; zero coefficients get `[-1, 1]`.
pub fn quantile_certificate(fit: &QuantileFit, x: &DesignMatrix, y: &[f64]) -> Result<f64> {
    certificate_at(x, y, fit.tau, fit.penalty, &fit.coefficients)
}

pub(crate) fn certificate_at(
    x: &DesignMatrix,
    y: &[f64],
    tau: f64,
    nu: f64,
    coef: &[f64],
) -> Result<f64> {
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    let t = x.nrows();
    let p = x.ncols();
    let fitted = x.apply(coef)?;
    let ymax = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let zero_tol = 1e-9 * (1.0 + ymax);

    // fixed part of the subgradient; free variables collected as columns
    let mut g0 = vec![0.0; p];
    let mut free_cols: Vec<Vec<f64>> = Vec::new();
    let mut bounds: Vec<(f64, f64)> = Vec::new();
    let xv = x.values();
    for r in 0..t {
        let res = y[r] - fitted[r];
        if res.abs() <= zero_tol {
            // -x_t s_t with s_t in [tau - 1, tau]
            free_cols.push((0..p).map(|j| -xv[(r, j)]).collect());
            bounds.push((tau - 1.0, tau));
        } else {
            let psi = if res < 0.0 { tau - 1.0 } else { tau };
            for j in 0..p {
                g0[j] -= xv[(r, j)] * psi;
            }
        }
    }
    for (i, (&b, &s)) in coef.iter().zip(x.scales()).enumerate() {
        let w = nu * s;
        if w == 0.0 {
            continue;
        }
        if b == 0.0 {
            let mut col = vec![0.0; p];
            col[i] = w;
            free_cols.push(col);
            bounds.push((-1.0, 1.0));
        } else {
            g0[i] += w * b.signum();
        }
    }
    let v = linalg::box_least_squares_residual(&g0, &free_cols, &bounds);
    Ok(v.iter().fold(0.0f64, |m, x| m.max(x.abs())) / t as f64)
}

/// Tuning knobs for [`QuantileSolver`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileSolverOptions {
    /// Simplex steps before giving up.
    pub max_iterations: usize,
    /// Required certificate, relative to `1 + |Y|_inf`.
    pub certificate_tolerance: f64,
    /// Steps between refactorisations of the basis.
    pub refactor_every: usize,
}

impl Default for QuantileSolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            certificate_tolerance: 1e-6,
            refactor_every: 50,
        }
    }
}

/// Result of a solve that also exposes the final basis for warm starts.
#[derive(Debug, Clone)]
pub struct QuantileSolution {
    pub fit: QuantileFit,
    pub basis: Vec<usize>,
    /// Objective after every step, starting from the initial point.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct QuantileSolver {
    pub options: QuantileSolverOptions,
}

impl QuantileSolver {
    pub fn new(options: QuantileSolverOptions) -> Self {
        Self { options }
    }

    pub fn fit(&self, x: &DesignMatrix, y: &[f64], tau: f64, nu: f64) -> Result<QuantileFit> {
        self.solve(x, y, tau, nu, None).map(|s| s.fit)
    }

    /// Solves from `warm_basis` (row ids of a previous solution on the same
    /// data) or, when `None`, from `a = 0`.
    pub fn solve(
        &self,
        x: &DesignMatrix,
        y: &[f64],
        tau: f64,
        nu: f64,
        warm_basis: Option<&[usize]>,
    ) -> Result<QuantileSolution> {
        validate_tau(tau)?;
        if !(nu >= 0.0 && nu.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "penalty must be finite and nonnegative, got {nu}"
            )));
        }
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("response contains non-finite values".into()));
        }
        let mut state = Simplex::new(x, y, tau, nu);
        let start = match warm_basis {
            Some(b) if b.len() == x.ncols() && b.iter().all(|&r| r < state.n) => b.to_vec(),
            _ => (state.t..state.n).collect(),
        };
        if state.set_basis(&start).is_err() {
            let cold: Vec<usize> = (state.t..state.n).collect();
            state.set_basis(&cold)?;
        }

        let ymax = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let target = self.options.certificate_tolerance * (1.0 + ymax);
        let mut trace = vec![state.objective()];
        let mut iterations = 0usize;
        let mut best: Option<(f64, Vec<f64>)> = None;

        // Degenerate vertices can stall the edge test; a tiny deterministic
        // perturbation of the response moves off them, after which the
        // original response is restored and the walk resumes.
        for attempt in 0..4 {
            state.run(&self.options, &mut iterations, &mut trace)?;
            let coef = state.coefficients();
            let cert = certificate_at(x, y, tau, nu, &coef)?;
            if cert <= target {
                let objective = quantile_objective(x, y, tau, nu, &coef)?;
                let fit = QuantileFit {
                    coefficients: coef,
                    tau,
                    penalty: nu,
                    objective,
                    certificate: cert,
                    iterations,
                };
                return Ok(QuantileSolution {
                    fit,
                    basis: state.basis.clone(),
                    trace,
                });
            }
            if best.as_ref().is_none_or(|(c, _)| cert < *c) {
                best = Some((cert, coef));
            }
            if iterations >= self.options.max_iterations {
                break;
            }
            let scale = 1e-9 * (1.0 + ymax) * f64::from(1u32 << (2 * attempt));
            state.perturb_response(scale, attempt as u64);
            state.run(&self.options, &mut iterations, &mut trace)?;
            state.restore_response();
        }
        let (certificate, best) = best.unwrap_or((f64::INFINITY, vec![0.0; x.ncols()]));
        Err(Error::NotConverged {
            solver: "quantile simplex",
            iterations,
            certificate,
            best,
        })
    }

    /// Solves along a penalty path with warm starts. `grid` may be in any
    /// order; results are returned in grid order.
    pub fn fit_path(
        &self,
        x: &DesignMatrix,
        y: &[f64],
        tau: f64,
        grid: &[f64],
    ) -> Result<Vec<QuantileFit>> {
        let mut basis: Option<Vec<usize>> = None;
        let mut out = Vec::with_capacity(grid.len());
        for &nu in grid {
            let sol = self.solve(x, y, tau, nu, basis.as_deref())?;
            basis = Some(sol.basis);
            out.push(sol.fit);
        }
        Ok(out)
    }
}

/// `fit_penalized_quantile` with default solver options.
pub fn fit_penalized_quantile(x: &DesignMatrix, y: &[f64], tau: f64, nu: f64) -> Result<QuantileFit> {
    QuantileSolver::default().fit(x, y, tau, nu)
}

/// Dense simplex state. Rows `0..t` are observations, rows `t..t+p` carry the
/// penalty of coefficient `row - t`.
struct Simplex<'a> {
    x: &'a DMatrix<f64>,
    t: usize,
    p: usize,
    n: usize,
    y: Vec<f64>,
    y_orig: Vec<f64>,
    // loss slopes for positive / negative residuals
    up: Vec<f64>,
    down: Vec<f64>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    // tableau: column j holds x_r' B^{-1} e_j for every row r; n x p column major
    z: Vec<f64>,
    beta: Vec<f64>,
    resid: Vec<f64>,
    zero_tol: f64,
}

impl<'a> Simplex<'a> {
    fn new(x: &'a DesignMatrix, y: &[f64], tau: f64, nu: f64) -> Self {
        let t = x.nrows();
        let p = x.ncols();
        let n = t + p;
        let mut up = vec![tau; n];
        let mut down = vec![1.0 - tau; n];
        for (i, s) in x.scales().iter().enumerate() {
            up[t + i] = nu * s;
            down[t + i] = nu * s;
        }
        let mut yy = y.to_vec();
        yy.extend(std::iter::repeat_n(0.0, p));
        let ymax = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self {
            x: x.values(),
            t,
            p,
            n,
            y_orig: yy.clone(),
            y: yy,
            up,
            down,
            basis: Vec::new(),
            in_basis: vec![false; n],
            z: vec![0.0; n * p],
            beta: vec![0.0; p],
            resid: vec![0.0; n],
            zero_tol: 1e-11 * (1.0 + ymax),
        }
    }

    #[inline]
    fn row(&self, r: usize, j: usize) -> f64 {
        if r < self.t {
            self.x[(r, j)]
        } else if r - self.t == j {
            1.0
        } else {
            0.0
        }
    }

    fn set_basis(&mut self, basis: &[usize]) -> Result<()> {
        let p = self.p;
        let xb = DMatrix::from_fn(p, p, |i, j| self.row(basis[i], j));
        let inv = xb.try_inverse().ok_or(Error::Singular("quantile basis"))?;
        // z rows for observations: X inv; penalty rows: inv itself
        let zx = self.x * &inv;
        for j in 0..p {
            let col = &mut self.z[j * self.n..(j + 1) * self.n];
            for r in 0..self.t {
                col[r] = zx[(r, j)];
            }
            for i in 0..p {
                col[self.t + i] = inv[(i, j)];
            }
        }
        let yb = DVector::from_fn(p, |i, _| self.y[basis[i]]);
        let beta = &inv * yb;
        self.beta = beta.iter().copied().collect();
        self.basis = basis.to_vec();
        self.in_basis.iter_mut().for_each(|b| *b = false);
        for &r in basis {
            self.in_basis[r] = true;
        }
        self.recompute_residuals();
        Ok(())
    }

    fn recompute_residuals(&mut self) {
        for r in 0..self.n {
            let fit: f64 = (0..self.p).map(|j| self.row(r, j) * self.beta[j]).sum();
            self.resid[r] = self.y[r] - fit;
        }
        for &r in &self.basis {
            self.resid[r] = 0.0;
        }
    }

    fn coefficients(&self) -> Vec<f64> {
        let mut b = self.beta.clone();
        // a penalty row in the basis pins its coefficient to exactly zero
        for &r in &self.basis {
            if r >= self.t {
                b[r - self.t] = 0.0;
            }
        }
        b
    }

    fn objective(&self) -> f64 {
        self.resid
            .iter()
            .enumerate()
            .map(|(r, &v)| if v > 0.0 { self.up[r] * v } else { -self.down[r] * v })
            .sum()
    }

    fn perturb_response(&mut self, scale: f64, salt: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + salt);
        for r in 0..self.t {
            self.y[r] = self.y_orig[r] + scale * (rng.random::<f64>() - 0.5);
        }
        let basis = self.basis.clone();
        // same basis, new response: only beta and residuals move
        if self.set_basis(&basis).is_err() {
            self.y.copy_from_slice(&self.y_orig);
        }
    }

    fn restore_response(&mut self) {
        self.y.copy_from_slice(&self.y_orig);
        let basis = self.basis.clone();
        let _ = self.set_basis(&basis);
    }

    fn run(
        &mut self,
        opts: &QuantileSolverOptions,
        iterations: &mut usize,
        trace: &mut Vec<f64>,
    ) -> Result<()> {
        let n = self.n;
        let p = self.p;
        let mut since_refactor = 0usize;
        let mut last_obj = self.objective();
        let mut breaks: Vec<(f64, usize)> = Vec::with_capacity(n);
        loop {
            if *iterations >= opts.max_iterations {
                return Ok(());
            }
            // directional derivatives along the 2p edges
            let mut best = (0.0f64, usize::MAX, 0.0f64);
            let mut deriv_scale = 0.0f64;
            for j in 0..p {
                let col = &self.z[j * n..(j + 1) * n];
                let mut g = 0.0;
                let mut deg_plus = 0.0;
                let mut deg_minus = 0.0;
                for r in 0..n {
                    if self.in_basis[r] {
                        continue;
                    }
                    let zr = col[r];
                    if zr == 0.0 {
                        continue;
                    }
                    let res = self.resid[r];
                    if res > self.zero_tol {
                        g += self.up[r] * zr;
                    } else if res < -self.zero_tol {
                        g -= self.down[r] * zr;
                    } else if zr > 0.0 {
                        deg_plus += self.down[r] * zr;
                        deg_minus += self.up[r] * zr;
                    } else {
                        deg_plus -= self.up[r] * zr;
                        deg_minus -= self.down[r] * zr;
                    }
                    deriv_scale += (self.up[r] + self.down[r]) * zr.abs();
                }
                let leaving = self.basis[j];
                let d_plus = self.down[leaving] - g + deg_plus;
                let d_minus = self.up[leaving] + g + deg_minus;
                if d_plus < best.0 {
                    best = (d_plus, j, 1.0);
                }
                if d_minus < best.0 {
                    best = (d_minus, j, -1.0);
                }
            }
            let tol = 1e-12 * (1.0 + deriv_scale / p as f64);
            let (slope0, j, sigma) = best;
            if j == usize::MAX || slope0 >= -tol {
                return Ok(());
            }

            // exact line search over kinks along beta + s * sigma * d_j
            breaks.clear();
            let col = &self.z[j * n..(j + 1) * n];
            for r in 0..n {
                if self.in_basis[r] {
                    continue;
                }
                let dz = sigma * col[r];
                if dz == 0.0 {
                    continue;
                }
                let res = self.resid[r];
                if res.abs() <= self.zero_tol {
                    continue;
                }
                let s = res / dz;
                if s > 0.0 {
                    breaks.push((s, r));
                }
            }
            breaks.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut slope = slope0;
            let mut entering = None;
            for &(s, r) in &breaks {
                slope += (self.up[r] + self.down[r]) * col[r].abs();
                if slope >= 0.0 {
                    entering = Some((s, r));
                    break;
                }
            }
            let (step, enter) = match entering {
                Some(e) => e,
                None => {
                    return Err(Error::InvalidArgument(
                        "quantile objective is unbounded along an edge; design is rank deficient".into(),
                    ))
                }
            };

            // move
            let leaving = self.basis[j];
            for k in 0..p {
                self.beta[k] += step * sigma * self.z[j * n + self.t + k];
            }
            for r in 0..n {
                self.resid[r] -= step * sigma * self.z[j * n + r];
            }
            self.resid[leaving] = -step * sigma;
            self.resid[enter] = 0.0;

            // pivot the tableau: entering row replaces basis slot j
            let piv = self.z[j * n + enter];
            if piv.abs() < 1e-14 {
                return Err(Error::Singular("quantile pivot"));
            }
            let row_vals: Vec<f64> = (0..p).map(|k| self.z[k * n + enter]).collect();
            {
                let (before, rest) = self.z.split_at_mut(j * n);
                let (colj, after) = rest.split_at_mut(n);
                colj.iter_mut().for_each(|v| *v /= piv);
                for k in 0..p {
                    if k == j {
                        continue;
                    }
                    let f = row_vals[k];
                    if f == 0.0 {
                        continue;
                    }
                    let target = if k < j {
                        &mut before[k * n..(k + 1) * n]
                    } else {
                        let off = (k - j - 1) * n;
                        &mut after[off..off + n]
                    };
                    for (tv, cv) in target.iter_mut().zip(colj.iter()) {
                        *tv -= f * cv;
                    }
                }
            }
            self.in_basis[leaving] = false;
            self.in_basis[enter] = true;
            self.basis[j] = enter;

            *iterations += 1;
            since_refactor += 1;
            if since_refactor >= opts.refactor_every {
                since_refactor = 0;
                let basis = self.basis.clone();
                self.set_basis(&basis)?;
            }
            let obj = self.objective();
            debug_assert!(
                obj <= last_obj + 1e-8 * (1.0 + last_obj.abs()),
                "objective increased: {last_obj} -> {obj}"
            );
            last_obj = obj;
            trace.push(obj);
        }
    }
}
