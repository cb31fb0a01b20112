//! Expected Shortfall LASSO.
//!
//! Given quantile predictions `Q_t`, the auxiliary response
//!
//! ```text
//! Yhat_t = Q_t + tau^-1 1{Y_t < Q_t} (Y_t - Q_t)
//! ```
//!
//! has the conditional ES as its conditional mean, so the ES coefficients are
//! estimated by the weighted LASSO
//!
//! ```text
//! min_g  T^-1 |Yhat - X g|_2^2 + lambda sum_i sigma_i |g_i|
//! ```
//!
//! solved by cyclic coordinate descent.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DesignMatrix;
use crate::linalg::norm_inf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryResponse {
    pub values: Vec<f64>,
    pub tau: f64,
    pub source_quantiles: Vec<f64>,
}

impl AuxiliaryResponse {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Writes `y, quantile, auxiliary` rows for auditing.
    pub fn write_csv<W: std::io::Write>(&self, y: &[f64], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "y", "quantile", "auxiliary"])?;
        for (t, ((yt, q), a)) in y
            .iter()
            .zip(&self.source_quantiles)
            .zip(&self.values)
            .enumerate()
        {
            w.write_record([t.to_string(), yt.to_string(), q.to_string(), a.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[inline]
fn auxiliary_value(y: f64, q: f64, tau: f64) -> f64 {
    if y < q {
        q + (y - q) / tau
    } else {
        q
    }
}

pub fn auxiliary_response(y: &[f64], q_hat: &[f64], tau: f64) -> Result<AuxiliaryResponse> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile level must lie in (0, 1), got {tau}"
        )));
    }
    if y.len() != q_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: q_hat.len(),
        });
    }
    let values = y
        .iter()
        .zip(q_hat)
        .map(|(&yt, &q)| auxiliary_value(yt, q, tau))
        .collect();
    Ok(AuxiliaryResponse {
        values,
        tau,
        source_quantiles: q_hat.to_vec(),
    })
}

/// `sign(z) max(|z| - t, 0)`.
#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ESFit {
    pub coefficients: Vec<f64>,
    pub penalty: f64,
    pub objective: f64,
    pub kkt_violation: f64,
    pub active_set: Vec<usize>,
    pub iterations: usize,
}

impl ESFit {
    pub fn predict(&self, x: &DesignMatrix) -> Result<Vec<f64>> {
        predict_es(self, x)
    }
}

pub fn predict_es(fit: &ESFit, x_new: &DesignMatrix) -> Result<Vec<f64>> {
    x_new.apply(&fit.coefficients)
}

pub fn es_objective(x: &DesignMatrix, y_aux: &[f64], lambda: f64, coef: &[f64]) -> Result<f64> {
    let fitted = x.apply(coef)?;
    let t = x.nrows() as f64;
    let rss: f64 = y_aux.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(rss / t + lambda * x.weighted_l1(coef))
}

/// `max_i |2 T^-1 X_i' Yhat| / sigma_i`; at or above it the zero vector is optimal.
pub fn lambda_max(x: &DesignMatrix, y_aux: &[f64]) -> f64 {
    let t = x.nrows() as f64;
    x.values()
        .column_iter()
        .zip(x.scales())
        .filter(|(_, &s)| s > 0.0)
        .map(|(col, &s)| {
            let g: f64 = col.iter().zip(y_aux).map(|(a, b)| a * b).sum();
            (2.0 * g / t).abs() / s
        })
        .fold(0.0, f64::max)
}

/// Geometric grid from `max` down to `max * min_ratio`, descending.
pub fn geometric_grid(max: f64, points: usize, min_ratio: f64) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![max],
        _ => {
            let step = min_ratio.ln() / (points - 1) as f64;
            (0..points).map(|i| max * (step * i as f64).exp()).collect()
        }
    }
}

/// Stationarity violation of the ES LASSO at `fit.coefficients`.
pub fn kkt_certificate(fit: &ESFit, x: &DesignMatrix, y_aux: &AuxiliaryResponse) -> Result<f64> {
    kkt_at(x, &y_aux.values, fit.penalty, &fit.coefficients)
}

pub(crate) fn kkt_at(x: &DesignMatrix, y: &[f64], lambda: f64, coef: &[f64]) -> Result<f64> {
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    let fitted = x.apply(coef)?;
    let resid: Vec<f64> = fitted.iter().zip(y).map(|(f, v)| f - v).collect();
    let t = x.nrows() as f64;
    let mut worst = 0.0f64;
    for (i, col) in x.values().column_iter().enumerate() {
        let g = 2.0 / t * col.iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>();
        let w = lambda * x.scales()[i];
        let v = if coef[i] != 0.0 {
            (g + w * coef[i].signum()).abs()
        } else {
            (g.abs() - w).max(0.0)
        };
        worst = worst.max(v);
    }
    Ok(worst)
}

/// `(T^-1 |Yhat - Ytilde|^2, (1 + 1/tau)^2 T^-1 |Qhat - Q|^2)`.
pub fn lemma3_gap(y: &[f64], q: &[f64], q_hat: &[f64], tau: f64) -> Result<(f64, f64)> {
    if y.len() != q.len() || y.len() != q_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: if q.len() != y.len() { q.len() } else { q_hat.len() },
        });
    }
    let tilde = auxiliary_response(y, q, tau)?;
    let hat = auxiliary_response(y, q_hat, tau)?;
    let t = y.len() as f64;
    let lhs = tilde
        .values
        .iter()
        .zip(&hat.values)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / t;
    let dq = q.iter().zip(q_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t;
    let rhs = (1.0 + 1.0 / tau).powi(2) * dq;
    Ok((lhs, rhs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsSolverOptions {
    pub max_cycles: usize,
    /// Stop when the largest coordinate move is below `change_tol (1 + |g|_inf)` ...
    pub change_tol: f64,
    /// ... and the KKT violation is below `kkt_tol (1 + |Yhat|_inf)`.
    pub kkt_tol: f64,
    /// Cycles between attempts at an exact solve on the current active set.
    pub polish_every: usize,
}

impl Default for EsSolverOptions {
    fn default() -> Self {
        Self {
            max_cycles: 100_000,
            change_tol: 1e-8,
            kkt_tol: 1e-6,
            polish_every: 25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EsSolution {
    pub fit: ESFit,
    /// Objective after each full cycle.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct EsSolver {
    pub options: EsSolverOptions,
}

impl EsSolver {
    pub fn new(options: EsSolverOptions) -> Self {
        Self { options }
    }

    pub fn fit(&self, x: &DesignMatrix, y_aux: &AuxiliaryResponse, lambda: f64) -> Result<ESFit> {
        self.solve(x, &y_aux.values, lambda, None).map(|s| s.fit)
    }

    pub fn solve(
        &self,
        x: &DesignMatrix,
        y: &[f64],
        lambda: f64,
        warm: Option<&[f64]>,
    ) -> Result<EsSolution> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "penalty must be finite and nonnegative, got {lambda}"
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
        let p = x.ncols();
        let t = x.nrows() as f64;
        let xv = x.values();
        let sq: Vec<f64> = xv.column_iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
        for (i, &s) in sq.iter().enumerate() {
            if s == 0.0 && lambda == 0.0 {
                return Err(Error::ZeroColumn { column: i });
            }
        }
        let thresholds: Vec<f64> = x.scales().iter().map(|s| lambda * s * t / 2.0).collect();

        let mut coef = match warm {
            Some(w) if w.len() == p => w.to_vec(),
            _ => vec![0.0; p],
        };
        for (c, &s) in coef.iter_mut().zip(&sq) {
            if s == 0.0 {
                *c = 0.0;
            }
        }
        let fitted = x.apply(&coef)?;
        let mut resid: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let kkt_target = self.options.kkt_tol * (1.0 + norm_inf(y));
        let objective = |resid: &[f64], coef: &[f64]| -> f64 {
            resid.iter().map(|r| r * r).sum::<f64>() / t + lambda * x.weighted_l1(coef)
        };
        let mut trace = vec![objective(&resid, &coef)];
        let mut best_kkt = f64::INFINITY;
        let mut best_coef = coef.clone();

        for cycle in 1..=self.options.max_cycles {
            let mut max_change = 0.0f64;
            for i in 0..p {
                if sq[i] == 0.0 {
                    continue;
                }
                let col = xv.column(i);
                let old = coef[i];
                let rho = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() + sq[i] * old;
                let new = soft_threshold(rho, thresholds[i]) / sq[i];
                let delta = new - old;
                if delta != 0.0 {
                    for (r, a) in resid.iter_mut().zip(col.iter()) {
                        *r -= delta * a;
                    }
                    coef[i] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            let obj = objective(&resid, &coef);
            debug_assert!(
                obj <= trace[trace.len() - 1] + 1e-10 * (1.0 + obj.abs()),
                "coordinate descent objective increased"
            );
            trace.push(obj);

            let small_steps = max_change < self.options.change_tol * (1.0 + norm_inf(&coef));
            if small_steps || cycle % self.options.polish_every == 0 {
                let kkt = kkt_at(x, y, lambda, &coef)?;
                if kkt < best_kkt {
                    best_kkt = kkt;
                    best_coef.clone_from(&coef);
                }
                if small_steps && kkt < kkt_target {
                    return Ok(self.finish(x, y, lambda, coef, cycle, trace));
                }
                if let Some(polished) = polish(x, y, lambda, &coef) {
                    let fitted = x.apply(&polished)?;
                    let new_resid: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
                    let new_obj = objective(&new_resid, &polished);
                    if new_obj <= obj {
                        coef = polished;
                        resid = new_resid;
                        trace.push(new_obj);
                        let kkt = kkt_at(x, y, lambda, &coef)?;
                        if kkt < kkt_target {
                            return Ok(self.finish(x, y, lambda, coef, cycle, trace));
                        }
                    }
                }
            }
        }
        Err(Error::NotConverged {
            solver: "es coordinate descent",
            iterations: self.options.max_cycles,
            certificate: best_kkt,
            best: best_coef,
        })
    }

    fn finish(
        &self,
        x: &DesignMatrix,
        y: &[f64],
        lambda: f64,
        coef: Vec<f64>,
        cycles: usize,
        trace: Vec<f64>,
    ) -> EsSolution {
        let objective = es_objective(x, y, lambda, &coef).unwrap_or(f64::NAN);
        let kkt_violation = kkt_at(x, y, lambda, &coef).unwrap_or(f64::NAN);
        let active_set = coef
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(i, _)| i)
            .collect();
        EsSolution {
            fit: ESFit {
                coefficients: coef,
                penalty: lambda,
                objective,
                kkt_violation,
                active_set,
                iterations: cycles,
            },
            trace,
        }
    }

    /// Penalty path with warm starts, in grid order.
    pub fn fit_path(&self, x: &DesignMatrix, y_aux: &AuxiliaryResponse, grid: &[f64]) -> Result<Vec<ESFit>> {
        let mut warm: Option<Vec<f64>> = None;
        let mut out = Vec::with_capacity(grid.len());
        for &lambda in grid {
            let sol = self.solve(x, &y_aux.values, lambda, warm.as_deref())?;
            warm = Some(sol.fit.coefficients.clone());
            out.push(sol.fit);
        }
        Ok(out)
    }
}

/// Exact minimiser on the current active set with the current signs, if the
/// signs are reproduced.
fn polish(x: &DesignMatrix, y: &[f64], lambda: f64, coef: &[f64]) -> Option<Vec<f64>> {
    let active: Vec<usize> = (0..coef.len()).filter(|&i| coef[i] != 0.0).collect();
    if active.is_empty() {
        return None;
    }
    let t = x.nrows() as f64;
    let xa = x.values().select_columns(active.iter());
    let gram: DMatrix<f64> = xa.transpose() * &xa;
    let yv = DVector::from_column_slice(y);
    let mut rhs = xa.transpose() * yv;
    for (k, &i) in active.iter().enumerate() {
        rhs[k] -= lambda * t / 2.0 * x.scales()[i] * coef[i].signum();
    }
    let sol = gram.cholesky()?.solve(&rhs);
    let mut out = vec![0.0; coef.len()];
    for (k, &i) in active.iter().enumerate() {
        if !sol[k].is_finite() || (lambda > 0.0 && sol[k].signum() != coef[i].signum()) {
            return None;
        }
        out[i] = sol[k];
    }
    Some(out)
}

pub fn fit_es_lasso(x: &DesignMatrix, y_aux: &AuxiliaryResponse, lambda: f64) -> Result<ESFit> {
    EsSolver::default().fit(x, y_aux, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_problem(t: usize, p: usize, seed: u64) -> (DesignMatrix, AuxiliaryResponse) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(t, p - 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DesignMatrix::with_intercept(&raw).unwrap();
        let y: Vec<f64> = (0..t).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let q = vec![-0.5; t];
        (x, auxiliary_response(&y, &q, 0.3).unwrap())
    }

    #[test]
    fn auxiliary_examples() {
        let a = auxiliary_response(&[1.0], &[1.0], 0.1).unwrap();
        assert_eq!(a.values, vec![1.0]);
        let a = auxiliary_response(&[-2.0], &[-1.0], 0.25).unwrap();
        assert_eq!(a.values, vec![-5.0]);
        let a = auxiliary_response(&[0.0], &[1.0], 0.5).unwrap();
        assert_eq!(a.values, vec![-1.0]);
        assert!(auxiliary_response(&[0.0], &[1.0, 2.0], 0.5).is_err());
        assert!(auxiliary_response(&[0.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn auxiliary_never_above_quantile() {
        let y = [-3.0, 0.0, 2.0, 1.0, -0.1];
        let q = [0.5, 0.5, 0.5, 1.0, -0.1];
        let a = auxiliary_response(&y, &q, 0.05).unwrap();
        for ((v, q), y) in a.values.iter().zip(&q).zip(&y) {
            assert!(v <= q);
            if y >= q {
                assert_eq!(v, q);
            }
        }
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-1.7, 0.0), -1.7);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
    }

    #[test]
    fn unpenalized_matches_least_squares() {
        let (x, aux) = random_problem(60, 5, 1);
        let fit = fit_es_lasso(&x, &aux, 0.0).unwrap();
        let xv = x.values();
        let ols = (xv.transpose() * xv)
            .cholesky()
            .unwrap()
            .solve(&(xv.transpose() * DVector::from_column_slice(&aux.values)));
        for (a, b) in fit.coefficients.iter().zip(ols.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_at_lambda_max() {
        let (x, aux) = random_problem(40, 4, 2);
        let lmax = lambda_max(&x, &aux.values);
        let fit = fit_es_lasso(&x, &aux, lmax).unwrap();
        assert!(fit.coefficients.iter().all(|&c| c == 0.0));
        assert!(fit.active_set.is_empty());
        assert!(kkt_certificate(&fit, &x, &aux).unwrap() <= 1e-12 * lmax);
        let fit = fit_es_lasso(&x, &aux, lmax * 0.9).unwrap();
        assert!(!fit.active_set.is_empty());
    }

    #[test]
    fn certificate_and_objective_consistent() {
        let (x, aux) = random_problem(50, 6, 3);
        let lmax = lambda_max(&x, &aux.values);
        let fit = fit_es_lasso(&x, &aux, lmax * 0.1).unwrap();
        let bound = 1e-6 * (1.0 + norm_inf(&aux.values));
        assert!(fit.kkt_violation <= bound);
        let obj = es_objective(&x, &aux.values, fit.penalty, &fit.coefficients).unwrap();
        assert!((obj - fit.objective).abs() <= 1e-10 * obj.abs().max(1.0));
        let expected: Vec<usize> = (0..6).filter(|&i| fit.coefficients[i] != 0.0).collect();
        assert_eq!(fit.active_set, expected);

        let mut bad = fit.clone();
        let i = bad.active_set[0];
        bad.coefficients[i] += 0.05;
        assert!(kkt_certificate(&bad, &x, &aux).unwrap() > 1e-4);
    }

    #[test]
    fn trace_nonincreasing_and_warm_path() {
        let (x, aux) = random_problem(80, 8, 4);
        let lmax = lambda_max(&x, &aux.values);
        let grid = geometric_grid(lmax, 15, 1e-3);
        let sol = EsSolver::default().solve(&x, &aux.values, grid[10], None).unwrap();
        for w in sol.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()));
        }
        let path = EsSolver::default().fit_path(&x, &aux, &grid).unwrap();
        for (fit, &l) in path.iter().zip(&grid) {
            let cold = fit_es_lasso(&x, &aux, l).unwrap();
            assert!(fit.objective <= cold.objective + 1e-8);
        }
    }

    #[test]
    fn zero_columns() {
        let mut raw = DMatrix::from_fn(10, 2, |r, c| (r as f64 - 4.5) * (c as f64 + 1.0));
        raw.column_mut(1).fill(0.0);
        let x = DesignMatrix::with_intercept(&raw).unwrap();
        let aux = auxiliary_response(&[1.0; 10], &[0.0; 10], 0.5).unwrap();
        assert!(matches!(fit_es_lasso(&x, &aux, 0.0), Err(Error::ZeroColumn { column: 2 })));
        let fit = fit_es_lasso(&x, &aux, 0.01).unwrap();
        assert_eq!(fit.coefficients[2], 0.0);
    }

    #[test]
    fn auxiliary_gap_examples() {
        let (l, r) = lemma3_gap(&[0.3, -1.0], &[0.0, 0.5], &[0.0, 0.5], 0.1).unwrap();
        assert_eq!((l, r), (0.0, 0.0));
        // Y = 0, Q = 1, Qhat = 2, tau = 1/2: Ytilde = 1 + 2(0 - 1) = -1, Yhat = 2 + 2(0 - 2) = -2
        let (l, r) = lemma3_gap(&[0.0], &[1.0], &[2.0], 0.5).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(r, 9.0);
    }

    #[test]
    fn geometric_grid_shape() {
        let g = geometric_grid(2.0, 5, 1e-4);
        assert_eq!(g.len(), 5);
        assert_eq!(g[0], 2.0);
        assert_abs_diff_eq!(g[4], 2e-4, epsilon = 1e-15);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }
}
