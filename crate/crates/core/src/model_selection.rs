//! Blocked cross-validation and out-of-sample loss metrics.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::es::{self, ESFit, EsSolver};
use crate::features::DesignMatrix;
use crate::quantile::{self, check_loss, QuantileFit, QuantileSolver};

/// Contiguous folds in time order (0-based, half-open).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub t: usize,
    pub k: usize,
    pub folds: Vec<Range<usize>>,
}

impl CvPlan {
    /// Every index outside fold `j`, in increasing order.
    pub fn train_indices(&self, j: usize) -> Vec<usize> {
        let held = &self.folds[j];
        (0..held.start).chain(held.end..self.t).collect()
    }

    pub fn test_indices(&self, j: usize) -> Vec<usize> {
        self.folds[j].clone().collect()
    }
}

/// Splits `0..t` into `k` consecutive blocks; the first `t % k` blocks get the
/// extra observation.
pub fn blocked_folds(t: usize, k: usize) -> Result<CvPlan> {
    if k < 2 || k > t {
        return Err(Error::InvalidArgument(format!(
            "need 2 <= folds <= observations, got {k} folds for {t} observations"
        )));
    }
    let base = t / k;
    let extra = t % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for j in 0..k {
        let len = base + usize::from(j < extra);
        folds.push(start..start + len);
        start += len;
    }
    Ok(CvPlan { t, k, folds })
}

/// A loss reported both as a sum over periods and per observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Loss {
    pub total: f64,
    pub mean: f64,
}

impl Loss {
    fn from_total(total: f64, n: usize) -> Self {
        Loss {
            total,
            mean: if n == 0 { 0.0 } else { total / n as f64 },
        }
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, got: b });
    }
    Ok(())
}

/// Tick loss of quantile predictions.
pub fn mean_tick_loss(y: &[f64], q_hat: &[f64], tau: f64) -> Result<Loss> {
    same_len(y.len(), q_hat.len())?;
    let total = y.iter().zip(q_hat).map(|(a, q)| check_loss(tau, a - q)).sum();
    Ok(Loss::from_total(total, y.len()))
}

/// Squared distance between ES predictions and the auxiliary response built
/// from `q_hat`.
pub fn es_mse(y: &[f64], q_hat: &[f64], es_hat: &[f64], tau: f64) -> Result<Loss> {
    same_len(y.len(), es_hat.len())?;
    let aux = es::auxiliary_response(y, q_hat, tau)?;
    let total = aux.values.iter().zip(es_hat).map(|(a, e)| (a - e).powi(2)).sum();
    Ok(Loss::from_total(total, y.len()))
}

/// A path fit that failed at grid point `index`.
#[derive(Debug)]
pub struct PathFailure {
    pub index: usize,
    pub error: Error,
}

/// Fits every grid point in order, tagging the first failure with its index.
pub fn fit_each<M>(
    grid: &[f64],
    mut fit: impl FnMut(f64) -> Result<M>,
) -> std::result::Result<Vec<M>, PathFailure> {
    grid.iter()
        .enumerate()
        .map(|(index, &g)| fit(g).map_err(|error| PathFailure { index, error }))
        .collect()
}

/// A penalised estimator that can be cross-validated.
///
/// `fit_path` only ever receives training rows.
pub trait PathFitter: Sync {
    type Model: Send;

    fn fit_path(
        &self,
        x: &DesignMatrix,
        y: &[f64],
        grid: &[f64],
    ) -> std::result::Result<Vec<Self::Model>, PathFailure>;

    /// Per-observation held-out loss.
    fn held_out_loss(&self, model: &Self::Model, x: &DesignMatrix, y: &[f64]) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTable {
    pub penalties: Vec<f64>,
    /// `fold_losses[g][j]`: loss at grid point `g` on fold `j`.
    pub fold_losses: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl LossTable {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let k = self.fold_losses.first().map_or(0, Vec::len);
        let mut header = vec!["penalty".to_string()];
        header.extend((0..k).map(|j| format!("fold{}", j + 1)));
        header.push("mean".into());
        w.write_record(&header)?;
        for ((p, row), m) in self.penalties.iter().zip(&self.fold_losses).zip(&self.mean) {
            let mut rec = vec![p.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            rec.push(m.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub chosen: f64,
    pub chosen_index: usize,
    pub table: LossTable,
}

/// Picks the penalty with the smallest mean held-out loss. Ties go to the
/// larger penalty.
pub fn cross_validate<F: PathFitter>(
    fitter: &F,
    x: &DesignMatrix,
    y: &[f64],
    grid: &[f64],
    plan: &CvPlan,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("penalty grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[0] >= w[1])) {
        return Err(Error::InvalidArgument("penalty grid must be sorted descending".into()));
    }
    same_len(x.nrows(), y.len())?;
    same_len(plan.t, y.len())?;

    let per_fold: Vec<Vec<f64>> = (0..plan.k)
        .into_par_iter()
        .map(|j| {
            let train = plan.train_indices(j);
            let test = plan.test_indices(j);
            let x_train = x.select_rows(&train);
            let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let x_test = x.select_rows(&test);
            let y_test: Vec<f64> = test.iter().map(|&i| y[i]).collect();
            let wrap = |g: usize, e: Error| Error::Fold {
                fold: j,
                penalty: grid[g],
                source: Box::new(e),
            };
            let models = fitter
                .fit_path(&x_train, &y_train, grid)
                .map_err(|f| wrap(f.index.min(grid.len() - 1), f.error))?;
            models
                .iter()
                .enumerate()
                .map(|(g, m)| fitter.held_out_loss(m, &x_test, &y_test).map_err(|e| wrap(g, e)))
                .collect()
        })
        .collect::<Result<_>>()?;

    let fold_losses: Vec<Vec<f64>> = (0..grid.len())
        .map(|g| per_fold.iter().map(|f| f[g]).collect())
        .collect();
    let mean: Vec<f64> = fold_losses
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    let mut chosen_index = 0;
    for g in 1..grid.len() {
        let better = mean[g] < mean[chosen_index]
            || (mean[g] == mean[chosen_index] && grid[g] > grid[chosen_index]);
        if better {
            chosen_index = g;
        }
    }
    Ok(CvResult {
        chosen: grid[chosen_index],
        chosen_index,
        table: LossTable {
            penalties: grid.to_vec(),
            fold_losses,
            mean,
        },
    })
}

/// Quantile regression at level `tau`, scored by mean tick loss.
#[derive(Debug, Clone)]
pub struct QuantileStage {
    pub tau: f64,
    pub solver: QuantileSolver,
}

impl PathFitter for QuantileStage {
    type Model = QuantileFit;

    fn fit_path(
        &self,
        x: &DesignMatrix,
        y: &[f64],
        grid: &[f64],
    ) -> std::result::Result<Vec<QuantileFit>, PathFailure> {
        let mut basis: Option<Vec<usize>> = None;
        fit_each(grid, |nu| {
            let sol = self.solver.solve(x, y, self.tau, nu, basis.as_deref())?;
            basis = Some(sol.basis);
            Ok(sol.fit)
        })
    }

    fn held_out_loss(&self, model: &QuantileFit, x: &DesignMatrix, y: &[f64]) -> Result<f64> {
        let q = model.predict(x)?;
        Ok(mean_tick_loss(y, &q, self.tau)?.mean)
    }
}

/// The ES regression with its quantile stage refit at a fixed `nu` on every
/// training split, scored by ES-MSE.
#[derive(Debug, Clone)]
pub struct EsStage {
    pub tau: f64,
    pub nu: f64,
    pub quantile_solver: QuantileSolver,
    pub es_solver: EsSolver,
}

#[derive(Debug, Clone)]
pub struct EsStageModel {
    pub quantile: QuantileFit,
    pub es: ESFit,
}

impl PathFitter for EsStage {
    type Model = EsStageModel;

    fn fit_path(
        &self,
        x: &DesignMatrix,
        y: &[f64],
        grid: &[f64],
    ) -> std::result::Result<Vec<EsStageModel>, PathFailure> {
        let first = |error| PathFailure { index: 0, error };
        let q = self.quantile_solver.fit(x, y, self.tau, self.nu).map_err(first)?;
        let q_in = q.predict(x).map_err(first)?;
        let aux = es::auxiliary_response(y, &q_in, self.tau).map_err(first)?;
        let mut warm: Option<Vec<f64>> = None;
        fit_each(grid, |lambda| {
            let sol = self.es_solver.solve(x, &aux.values, lambda, warm.as_deref())?;
            warm = Some(sol.fit.coefficients.clone());
            Ok(EsStageModel {
                quantile: q.clone(),
                es: sol.fit,
            })
        })
    }

    fn held_out_loss(&self, model: &EsStageModel, x: &DesignMatrix, y: &[f64]) -> Result<f64> {
        let q = model.quantile.predict(x)?;
        let e = model.es.predict(x)?;
        Ok(es_mse(y, &q, &e, self.tau)?.mean)
    }
}

/// Grid settings shared by both stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub folds: usize,
    pub points: usize,
    /// Smallest grid value as a fraction of the largest.
    pub min_ratio: f64,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            points: 30,
            min_ratio: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageSelection {
    pub nu: f64,
    pub lambda: f64,
    pub quantile_cv: CvResult,
    pub es_cv: CvResult,
}

/// Quantile penalty grid from `nu_max` of the full sample.
pub fn quantile_grid(x: &DesignMatrix, y: &[f64], tau: f64, opts: &CvOptions) -> Vec<f64> {
    let top = quantile::nu_max(x, y, tau);
    es::geometric_grid(top.max(f64::MIN_POSITIVE), opts.points, opts.min_ratio)
}

/// Selects `nu` for the quantile stage, then `lambda` for the ES stage with
/// the quantile stage refit at the chosen `nu` inside every training split.
pub fn two_stage_cv(
    x: &DesignMatrix,
    y: &[f64],
    tau: f64,
    opts: &CvOptions,
    quantile_solver: &QuantileSolver,
    es_solver: &EsSolver,
) -> Result<TwoStageSelection> {
    let plan = blocked_folds(y.len(), opts.folds)?;
    let q_stage = QuantileStage {
        tau,
        solver: quantile_solver.clone(),
    };
    let q_grid = quantile_grid(x, y, tau, opts);
    let quantile_cv = cross_validate(&q_stage, x, y, &q_grid, &plan)?;
    let nu = quantile_cv.chosen;

    let q_full = quantile_solver.fit(x, y, tau, nu)?;
    let aux = es::auxiliary_response(y, &q_full.predict(x)?, tau)?;
    let l_top = es::lambda_max(x, &aux.values);
    let l_grid = es::geometric_grid(l_top.max(f64::MIN_POSITIVE), opts.points, opts.min_ratio);
    let e_stage = EsStage {
        tau,
        nu,
        quantile_solver: quantile_solver.clone(),
        es_solver: es_solver.clone(),
    };
    let es_cv = cross_validate(&e_stage, x, y, &l_grid, &plan)?;
    Ok(TwoStageSelection {
        nu,
        lambda: es_cv.chosen,
        quantile_cv,
        es_cv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use std::sync::Mutex;

    #[test]
    fn fold_examples() {
        let p = blocked_folds(10, 5).unwrap();
        assert_eq!(p.folds, vec![0..2, 2..4, 4..6, 6..8, 8..10]);
        let p = blocked_folds(11, 5).unwrap();
        let sizes: Vec<usize> = p.folds.iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
        let p = blocked_folds(5, 5).unwrap();
        assert!(p.folds.iter().all(|r| r.len() == 1));
        assert!(blocked_folds(4, 5).is_err());
        assert!(blocked_folds(4, 1).is_err());
        assert_eq!(p.train_indices(2), vec![0, 1, 3, 4]);
    }

    #[test]
    fn loss_examples() {
        let y = [1.0, -2.0, 0.5];
        assert_eq!(mean_tick_loss(&y, &y, 0.1).unwrap().total, 0.0);
        let q = [0.0, 0.0, 0.0];
        let l = mean_tick_loss(&y, &q, 0.5).unwrap();
        assert_eq!(l.total, 0.5 * 3.5);
        assert_eq!(l.mean, 0.5 * 3.5 / 3.0);

        let aux = es::auxiliary_response(&y, &q, 0.2).unwrap();
        assert_eq!(es_mse(&y, &q, &aux.values, 0.2).unwrap().total, 0.0);
        let above = [2.0, 3.0];
        assert_eq!(es_mse(&above, &[1.0, 1.0], &[1.0, 1.0], 0.2).unwrap().total, 0.0);
        assert!(es_mse(&y, &q, &[0.0], 0.2).is_err());
    }

    #[test]
    fn es_mse_matches_loop() {
        let y = [0.3, -1.2, -0.4, 2.0];
        let q = [-0.1, -0.5, -0.5, 0.0];
        let e = [-0.7, -0.9, -1.1, -0.2];
        let tau = 0.25;
        let mut total = 0.0;
        for t in 0..4 {
            let a = if y[t] < q[t] { q[t] + (y[t] - q[t]) / tau } else { q[t] };
            total += (a - e[t]) * (a - e[t]);
        }
        assert!((es_mse(&y, &q, &e, tau).unwrap().total - total).abs() < 1e-14);
    }

    /// Records which responses it was trained on; the loss is a fixed table.
    struct Spy {
        seen: Mutex<Vec<f64>>,
        losses: Vec<f64>,
    }

    impl PathFitter for Spy {
        type Model = usize;
        fn fit_path(
            &self,
            _x: &DesignMatrix,
            y: &[f64],
            grid: &[f64],
        ) -> std::result::Result<Vec<usize>, PathFailure> {
            self.seen.lock().unwrap().extend_from_slice(y);
            Ok((0..grid.len()).collect())
        }
        fn held_out_loss(&self, m: &usize, _x: &DesignMatrix, _y: &[f64]) -> Result<f64> {
            Ok(self.losses[*m])
        }
    }

    fn toy(t: usize) -> (DesignMatrix, Vec<f64>) {
        let raw = DMatrix::from_fn(t, 1, |r, _| (r as f64).sin());
        (DesignMatrix::with_intercept(&raw).unwrap(), (0..t).map(|i| i as f64).collect())
    }

    #[test]
    fn held_out_rows_never_reach_fitter() {
        let (x, y) = toy(23);
        let plan = blocked_folds(23, 5).unwrap();
        for j in 0..plan.k {
            let spy = Spy {
                seen: Mutex::new(Vec::new()),
                losses: vec![1.0],
            };
            let train = plan.train_indices(j);
            let x_train = x.select_rows(&train);
            let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            spy.fit_path(&x_train, &y_train, &[1.0]).unwrap();
            let seen = spy.seen.into_inner().unwrap();
            for i in plan.folds[j].clone() {
                assert!(!seen.contains(&y[i]));
            }
        }
        // and through cross_validate: every row is seen exactly k - 1 times
        let spy = Spy {
            seen: Mutex::new(Vec::new()),
            losses: vec![1.0],
        };
        cross_validate(&spy, &x, &y, &[1.0], &plan).unwrap();
        let seen = spy.seen.into_inner().unwrap();
        for v in &y {
            assert_eq!(seen.iter().filter(|s| *s == v).count(), plan.k - 1);
        }
    }

    #[test]
    fn selection_rules() {
        let (x, y) = toy(20);
        let plan = blocked_folds(20, 4).unwrap();
        let spy = |losses: Vec<f64>| Spy {
            seen: Mutex::new(Vec::new()),
            losses,
        };
        let r = cross_validate(&spy(vec![3.0]), &x, &y, &[0.7], &plan).unwrap();
        assert_eq!(r.chosen, 0.7);
        let r = cross_validate(&spy(vec![2.0, 1.0, 1.0, 5.0]), &x, &y, &[4.0, 3.0, 2.0, 1.0], &plan).unwrap();
        assert_eq!(r.chosen, 3.0);
        assert_eq!(r.chosen_index, 1);
        assert!(cross_validate(&spy(vec![1.0, 1.0]), &x, &y, &[1.0, 2.0], &plan).is_err());
        assert!(cross_validate(&spy(vec![]), &x, &y, &[], &plan).is_err());
    }

    struct Failing;
    impl PathFitter for Failing {
        type Model = ();
        fn fit_path(
            &self,
            _x: &DesignMatrix,
            _y: &[f64],
            grid: &[f64],
        ) -> std::result::Result<Vec<()>, PathFailure> {
            fit_each(grid, |g| if g < 1.0 { Err(Error::Singular("test")) } else { Ok(()) })
        }
        fn held_out_loss(&self, _m: &(), _x: &DesignMatrix, _y: &[f64]) -> Result<f64> {
            Ok(0.0)
        }
    }

    #[test]
    fn fold_errors_carry_context() {
        let (x, y) = toy(10);
        let plan = blocked_folds(10, 2).unwrap();
        match cross_validate(&Failing, &x, &y, &[2.0, 0.5], &plan) {
            Err(Error::Fold { penalty, .. }) => assert_eq!(penalty, 0.5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn table_csv() {
        let t = LossTable {
            penalties: vec![2.0, 1.0],
            fold_losses: vec![vec![0.5, 0.25], vec![0.1, 0.3]],
            mean: vec![0.375, 0.2],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next().unwrap(), "penalty,fold1,fold2,mean");
        assert_eq!(s.lines().count(), 3);
    }
}
