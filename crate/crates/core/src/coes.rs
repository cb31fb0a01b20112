//! Conditional Expected Shortfall (CoES) of the market given an industry
//! return at its VaR.
//!
//! Four fits share one training window:
//!
//! 1. `VaR^I`: tau-quantile of `R^I` on `psi(Z_{t-1})`
//! 2. `Median^I`: median of `R^I` on `psi(Z_{t-1})`
//! 3. `VaR^M`: tau-quantile of `R^M` on `phi(R^I_t, Z_{t-1})`
//! 4. `ES^M`: ES of `R^M` on `phi(R^I_t, Z_{t-1})`, auxiliary response from (3)
//!
//! `CoES_t` evaluates the ES model with `VaR^I_t` substituted for `R^I_t`;
//! `DeltaCoES_t` is its difference from the median substitution.

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::es::{self, AuxiliaryResponse, ESFit, EsSolver};
use crate::features::{simulation_dictionary, ChebyshevDictionary};
use crate::model_selection::{
    blocked_folds, cross_validate, es_mse, mean_tick_loss, quantile_grid, two_stage_cv, CvOptions, Loss,
    QuantileStage,
};
use crate::quantile::{QuantileFit, QuantileSolver};
use crate::simulation::{simulate_factors_with_rng, SimulationConfig};

/// Fewest rows a panel may have after lagging and dropping missing values.
pub const MIN_PANEL_ROWS: usize = 50;

/// Returns at `t` aligned with state variables at `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub dates: Vec<String>,
    pub market: Vec<f64>,
    pub industry: Vec<f64>,
    /// Lagged state variables, one row per date.
    pub state: DMatrix<f64>,
    pub state_names: Vec<String>,
    /// Rows removed at ingestion because a required value was missing.
    pub dropped_missing: usize,
}

impl Panel {
    /// Builds an already aligned panel.
    pub fn new(
        dates: Vec<String>,
        market: Vec<f64>,
        industry: Vec<f64>,
        state: DMatrix<f64>,
        state_names: Vec<String>,
    ) -> Result<Self> {
        let n = dates.len();
        for len in [market.len(), industry.len(), state.nrows()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        if state_names.len() != state.ncols() {
            return Err(Error::DimensionMismatch {
                expected: state.ncols(),
                got: state_names.len(),
            });
        }
        if market.iter().chain(&industry).chain(state.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Panel("panel contains non-finite values".into()));
        }
        Ok(Self {
            dates,
            market,
            industry,
            state,
            state_names,
            dropped_missing: 0,
        })
    }

    /// Pairs returns at `t` with state variables at `t - 1`; the first row is lost.
    pub fn from_unlagged(
        dates: Vec<String>,
        market: Vec<f64>,
        industry: Vec<f64>,
        state: DMatrix<f64>,
        state_names: Vec<String>,
    ) -> Result<Self> {
        let n = dates.len();
        if n < 2 || state.nrows() != n {
            return Err(Error::Panel(format!("cannot lag a panel with {n} rows")));
        }
        let lagged = state.rows(0, n - 1).into_owned();
        Self::new(dates[1..].to_vec(), market[1..].to_vec(), industry[1..].to_vec(), lagged, state_names)
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Panel> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "row range {start}..{end} outside panel of {} rows",
                self.len()
            )));
        }
        Ok(Panel {
            dates: self.dates[start..end].to_vec(),
            market: self.market[start..end].to_vec(),
            industry: self.industry[start..end].to_vec(),
            state: self.state.rows(start, end - start).into_owned(),
            state_names: self.state_names.clone(),
            dropped_missing: self.dropped_missing,
        })
    }

    /// `[R^I, Z]` with `R^I` replaced by `industry` when given.
    fn market_raw(&self, industry: Option<&[f64]>) -> DMatrix<f64> {
        let r = industry.unwrap_or(&self.industry);
        let n = self.len();
        let m = self.state.ncols();
        DMatrix::from_fn(n, m + 1, |t, j| if j == 0 { r[t] } else { self.state[(t, j - 1)] })
    }
}

/// Assigns CSV columns to panel roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub date: String,
    pub market: String,
    pub industry: String,
    pub state: Vec<String>,
}

fn is_missing(s: &str) -> bool {
    matches!(s.trim(), "" | "NA" | "N/A" | "NaN" | "nan" | "." | "null")
}

/// Sort key of a date cell: days since the common era for ISO dates,
/// otherwise the number itself.
fn date_key(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(f64::from(d.num_days_from_ce()));
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a panel CSV, drops rows with missing required values and lags the
/// state variables by one row.
pub fn load_panel(path: impl AsRef<Path>, map: &ColumnMap) -> Result<Panel> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let find = |role: &str, name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Panel(format!("column '{name}' for role {role} not found")))
    };
    let date_col = find("date", &map.date)?;
    let market_col = find("market", &map.market)?;
    let industry_col = find("industry", &map.industry)?;
    let state_cols = map
        .state
        .iter()
        .map(|n| find("state", n))
        .collect::<Result<Vec<_>>>()?;
    if state_cols.is_empty() {
        return Err(Error::Panel("no state variables mapped".into()));
    }

    let mut dates = Vec::new();
    let mut keys = Vec::new();
    let mut market = Vec::new();
    let mut industry = Vec::new();
    let mut state: Vec<Vec<f64>> = Vec::new();
    let mut dropped = 0usize;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |c: usize| record.get(c).unwrap_or("");
        let date = cell(date_col).trim().to_string();
        let key = date_key(&date)
            .ok_or_else(|| Error::Panel(format!("row {}: unreadable date '{date}'", line + 2)))?;
        let numeric: Vec<usize> = [market_col, industry_col].into_iter().chain(state_cols.iter().copied()).collect();
        if numeric.iter().any(|&c| is_missing(cell(c))) {
            dropped += 1;
            continue;
        }
        let mut values = Vec::with_capacity(numeric.len());
        for &c in &numeric {
            let v: f64 = cell(c).trim().parse().map_err(|_| {
                Error::Panel(format!("row {}: non-numeric value '{}' in column '{}'", line + 2, cell(c), &headers[c]))
            })?;
            values.push(v);
        }
        if let Some(&prev) = keys.last() {
            if key <= prev {
                return Err(Error::Panel(format!(
                    "dates must be strictly increasing; '{date}' follows '{}'",
                    dates.last().unwrap()
                )));
            }
        }
        keys.push(key);
        dates.push(date);
        market.push(values[0]);
        industry.push(values[1]);
        state.push(values[2..].to_vec());
    }
    let n = dates.len();
    if n < MIN_PANEL_ROWS + 1 {
        return Err(Error::Panel(format!(
            "need at least {} usable rows after lagging, got {}",
            MIN_PANEL_ROWS,
            n.saturating_sub(1)
        )));
    }
    let m = state_cols.len();
    let z = DMatrix::from_fn(n, m, |t, j| state[t][j]);
    let mut panel = Panel::from_unlagged(dates, market, industry, z, map.state.clone())?;
    panel.dropped_missing = dropped;
    Ok(panel)
}

/// Mean of the last `window` squared returns; `None` until `window`
/// observations are available.
pub fn rolling_volatility(returns: &[f64], window: usize) -> Vec<Option<f64>> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(returns.len());
    let mut sum = 0.0;
    for t in 0..returns.len() {
        sum += returns[t] * returns[t];
        if t >= window {
            sum -= returns[t - window] * returns[t - window];
        }
        if t + 1 >= window {
            // recompute occasionally so that cancellation cannot accumulate
            if t % 1024 == 0 {
                sum = returns[t + 1 - window..=t].iter().map(|r| r * r).sum();
            }
            out.push(Some(sum / window as f64));
        } else {
            out.push(None);
        }
    }
    out
}

/// Penalty choice for the four fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltySpec {
    /// Blocked cross-validation; two-stage for the market fits.
    Cv(CvOptions),
    Fixed(StagePenalties),
    Unpenalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StagePenalties {
    pub var_industry: f64,
    pub median_industry: f64,
    pub var_market: f64,
    pub es_market: f64,
}

impl StagePenalties {
    pub const ZERO: StagePenalties = StagePenalties {
        var_industry: 0.0,
        median_industry: 0.0,
        var_market: 0.0,
        es_market: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoesModel {
    pub tau: f64,
    pub degree: u32,
    /// Dictionary on `Z_{t-1}`.
    pub psi: ChebyshevDictionary,
    /// Dictionary on `(R^I_t, Z_{t-1})`.
    pub phi: ChebyshevDictionary,
    pub var_industry: QuantileFit,
    pub median_industry: QuantileFit,
    pub var_market: QuantileFit,
    pub es_market: ESFit,
    pub penalties: StagePenalties,
    /// Auxiliary response the ES fit was trained on.
    pub training_auxiliary: AuxiliaryResponse,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Fits the four stages on `panel`. With `degree == 1` cross-validation is
/// replaced by zero penalties.
pub fn fit_coes(panel: &Panel, tau: f64, degree: u32, penalties: &PenaltySpec) -> Result<CoesModel> {
    if !(tau > 0.0 && tau <= 0.5) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 0.5], got {tau}")));
    }
    let qs = QuantileSolver::default();
    let es_solver = EsSolver::default();
    let psi = stage("dictionary", ChebyshevDictionary::fit(&panel.state, degree))?
        .with_names(panel.state_names.clone());
    let x_psi = psi.transform(&panel.state)?;
    let raw_m = panel.market_raw(None);
    let mut names = vec!["industry".to_string()];
    names.extend(panel.state_names.iter().cloned());
    let phi = stage("dictionary", ChebyshevDictionary::fit(&raw_m, degree))?.with_names(names);
    let x_phi = phi.transform(&raw_m)?;

    let spec = match penalties {
        PenaltySpec::Cv(_) if degree == 1 => &PenaltySpec::Unpenalized,
        other => other,
    };
    let chosen = match spec {
        PenaltySpec::Unpenalized => StagePenalties::ZERO,
        PenaltySpec::Fixed(p) => *p,
        PenaltySpec::Cv(opts) => {
            let plan = blocked_folds(panel.len(), opts.folds)?;
            let pick = |level: f64| -> Result<f64> {
                let fitter = QuantileStage { tau: level, solver: qs.clone() };
                let grid = quantile_grid(&x_psi, &panel.industry, level, opts);
                Ok(cross_validate(&fitter, &x_psi, &panel.industry, &grid, &plan)?.chosen)
            };
            let var_industry = stage("var_industry", pick(tau))?;
            let median_industry = stage("median_industry", pick(0.5))?;
            let sel = stage("var_market", two_stage_cv(&x_phi, &panel.market, tau, opts, &qs, &es_solver))?;
            StagePenalties {
                var_industry,
                median_industry,
                var_market: sel.nu,
                es_market: sel.lambda,
            }
        }
    };

    let var_industry = stage("var_industry", qs.fit(&x_psi, &panel.industry, tau, chosen.var_industry))?;
    let median_industry = stage(
        "median_industry",
        qs.fit(&x_psi, &panel.industry, 0.5, chosen.median_industry),
    )?;
    let var_market = stage("var_market", qs.fit(&x_phi, &panel.market, tau, chosen.var_market))?;
    let q_in = var_market.predict(&x_phi)?;
    let training_auxiliary = es::auxiliary_response(&panel.market, &q_in, tau)?;
    let es_market = stage("es_market", es_solver.fit(&x_phi, &training_auxiliary, chosen.es_market))?;
    Ok(CoesModel {
        tau,
        degree,
        psi,
        phi,
        var_industry,
        median_industry,
        var_market,
        es_market,
        penalties: chosen,
        training_auxiliary,
    })
}

/// Per-period predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoesPredictions {
    pub dates: Vec<String>,
    pub var_industry: Vec<f64>,
    pub median_industry: Vec<f64>,
    pub var_market: Vec<f64>,
    pub es_market: Vec<f64>,
    pub coes: Vec<f64>,
    pub coes_median: Vec<f64>,
    pub delta_coes: Vec<f64>,
}

impl CoesPredictions {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "date",
            "var_industry",
            "median_industry",
            "var_market",
            "es_market",
            "coes",
            "coes_median",
            "delta_coes",
        ])?;
        for t in 0..self.dates.len() {
            let mut rec = vec![self.dates[t].clone()];
            for v in [
                self.var_industry[t],
                self.median_industry[t],
                self.var_market[t],
                self.es_market[t],
                self.coes[t],
                self.coes_median[t],
                self.delta_coes[t],
            ] {
                rec.push(v.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Predictions on `panel` with the frozen training dictionaries.
pub fn coes_predict(model: &CoesModel, panel: &Panel) -> Result<CoesPredictions> {
    if panel.state.ncols() != model.psi.raw_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.psi.raw_dim(),
            got: panel.state.ncols(),
        });
    }
    let x_psi = model.psi.transform(&panel.state)?;
    let var_industry = model.var_industry.predict(&x_psi)?;
    let median_industry = model.median_industry.predict(&x_psi)?;
    let x_phi = model.phi.transform(&panel.market_raw(None))?;
    let var_market = model.var_market.predict(&x_phi)?;
    let es_market = model.es_market.predict(&x_phi)?;
    let coes = model
        .es_market
        .predict(&model.phi.transform(&panel.market_raw(Some(&var_industry)))?)?;
    let coes_median = model
        .es_market
        .predict(&model.phi.transform(&panel.market_raw(Some(&median_industry)))?)?;
    let delta_coes = coes.iter().zip(&coes_median).map(|(a, b)| a - b).collect();
    Ok(CoesPredictions {
        dates: panel.dates.clone(),
        var_industry,
        median_industry,
        var_market,
        es_market,
        coes,
        coes_median,
        delta_coes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoesReport {
    pub degree: u32,
    pub tau: f64,
    pub penalized: bool,
    pub penalties: StagePenalties,
    pub mtl_var_industry: Loss,
    pub mtl_median_industry: Loss,
    pub mtl_var_market: Loss,
    pub es_mse_market: Loss,
    pub mean_delta_coes: f64,
}

impl CoesReport {
    /// `(panel, metric, total, mean)` rows.
    pub fn rows(&self) -> Vec<(&'static str, &'static str, f64, f64)> {
        vec![
            ("A", "es_mse_market", self.es_mse_market.total, self.es_mse_market.mean),
            ("B", "mtl_var_market", self.mtl_var_market.total, self.mtl_var_market.mean),
            ("B", "mtl_var_industry", self.mtl_var_industry.total, self.mtl_var_industry.mean),
            ("B", "mtl_median_industry", self.mtl_median_industry.total, self.mtl_median_industry.mean),
            ("C", "mean_delta_coes", self.mean_delta_coes, self.mean_delta_coes),
        ]
    }
}

/// Long-format report for several configurations.
pub fn write_reports_csv<W: std::io::Write>(reports: &[CoesReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["panel", "metric", "degree", "penalized", "tau", "total", "mean"])?;
    for r in reports {
        for (panel, metric, total, mean) in r.rows() {
            w.write_record([
                panel.to_string(),
                metric.to_string(),
                r.degree.to_string(),
                r.penalized.to_string(),
                r.tau.to_string(),
                total.to_string(),
                mean.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Losses of the four fits on `test` plus the average DeltaCoES.
pub fn evaluate_out_of_sample(model: &CoesModel, test: &Panel) -> Result<(CoesReport, CoesPredictions)> {
    let pred = coes_predict(model, test)?;
    let tau = model.tau;
    let report = CoesReport {
        degree: model.degree,
        tau,
        penalized: model.penalties != StagePenalties::ZERO,
        penalties: model.penalties,
        mtl_var_industry: mean_tick_loss(&test.industry, &pred.var_industry, tau)?,
        mtl_median_industry: mean_tick_loss(&test.industry, &pred.median_industry, 0.5)?,
        mtl_var_market: mean_tick_loss(&test.market, &pred.var_market, tau)?,
        es_mse_market: es_mse(&test.market, &pred.var_market, &pred.es_market, tau)?,
        mean_delta_coes: pred.delta_coes.iter().sum::<f64>() / pred.delta_coes.len().max(1) as f64,
    };
    Ok((report, pred))
}

/// Settings for fitting on a training window and evaluating on the window
/// that follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoesRunConfig {
    pub tau: f64,
    pub degrees: Vec<u32>,
    pub train: usize,
    pub test: usize,
    pub penalty: PenaltySpec,
}

/// One report per degree; degrees are fitted concurrently.
pub fn run_coes(panel: &Panel, cfg: &CoesRunConfig) -> Result<Vec<(CoesReport, CoesPredictions)>> {
    if cfg.degrees.is_empty() {
        return Err(Error::InvalidArgument("no degrees requested".into()));
    }
    if cfg.train + cfg.test > panel.len() || cfg.train == 0 || cfg.test == 0 {
        return Err(Error::InvalidArgument(format!(
            "train ({}) + test ({}) must be positive and fit in the panel ({} rows)",
            cfg.train,
            cfg.test,
            panel.len()
        )));
    }
    let train = panel.slice(0, cfg.train)?;
    let test = panel.slice(cfg.train, cfg.train + cfg.test)?;
    cfg.degrees
        .par_iter()
        .map(|&k| {
            let model = fit_coes(&train, cfg.tau, k, &cfg.penalty)?;
            evaluate_out_of_sample(&model, &test)
        })
        .collect()
}

/// Location-scale panel with Chebyshev nonlinearities:
///
/// ```text
/// R^I_t = psi_t' xi_I + (psi_t' zeta_I) e_t
/// R^M_t = phi_t' xi_M + (phi_t' zeta_M) h_t
/// ```
///
/// where `psi_t`, `phi_t` are shifted, standardised Chebyshev expansions of
/// `Z_{t-1}` and `(R^I_t, Z_{t-1})`, and `Z` follows the simulation factor
/// process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPanelConfig {
    pub periods: usize,
    pub state_dim: usize,
    pub degree: u32,
    pub s0: usize,
    pub sigma: f64,
    pub rho: f64,
    pub theta: f64,
    /// Added to the coefficient of the linear industry column in `xi_M`.
    pub industry_loading: f64,
    pub seed: u64,
}

impl Default for SyntheticPanelConfig {
    fn default() -> Self {
        Self {
            periods: 1000,
            state_dim: 6,
            degree: 3,
            s0: 2,
            sigma: 1.0,
            rho: 0.5,
            theta: 0.15,
            industry_loading: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPanel {
    pub panel: Panel,
    pub xi_industry: Vec<f64>,
    pub zeta_industry: Vec<f64>,
    pub xi_market: Vec<f64>,
    pub zeta_market: Vec<f64>,
}

fn draw_supports(rng: &mut ChaCha8Rng, pool: usize, s0: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let draws = rand::seq::index::sample(rng, pool, 2 * s0).into_vec();
    let mut xi = vec![0.0; p];
    let mut zeta = vec![0.0; p];
    for i in 0..s0 {
        xi[1 + draws[i]] = 1.0 / (2.0 + i as f64);
        zeta[1 + draws[s0 + i]] = 1.0 / (2.0 + i as f64);
    }
    (xi, zeta)
}

pub fn synthetic_panel(cfg: &SyntheticPanelConfig) -> Result<SyntheticPanel> {
    let k = cfg.degree as usize;
    if cfg.state_dim == 0 || k == 0 || cfg.periods < MIN_PANEL_ROWS || 2 * cfg.s0 > 3.min(cfg.state_dim) * k {
        return Err(Error::InvalidArgument("invalid synthetic panel configuration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let factor_cfg = SimulationConfig {
        d: cfg.state_dim,
        rho: cfg.rho,
        theta: cfg.theta,
        ..SimulationConfig::default()
    };
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for _ in 0..100 {
        let z = simulate_factors_with_rng(&factor_cfg, cfg.periods, &mut rng);
        let (x_psi, _) = simulation_dictionary(&z, cfg.degree, None)?;
        let (xi_i, zeta_i) = draw_supports(&mut rng, 3.min(cfg.state_dim) * k, cfg.s0, x_psi.ncols());
        let scale_i = x_psi.apply(&zeta_i)?;
        let loc_i = x_psi.apply(&xi_i)?;
        if scale_i.iter().any(|s| !(*s >= 0.0)) {
            continue;
        }
        let industry: Vec<f64> = loc_i.iter().zip(&scale_i).map(|(l, s)| l + s * noise.sample(&mut rng)).collect();
        let raw_m = DMatrix::from_fn(cfg.periods, cfg.state_dim + 1, |t, j| {
            if j == 0 {
                industry[t]
            } else {
                z[(t, j - 1)]
            }
        });
        let (x_phi, _) = simulation_dictionary(&raw_m, cfg.degree, None)?;
        let (mut xi_m, zeta_m) = draw_supports(&mut rng, 3.min(cfg.state_dim + 1) * k, cfg.s0, x_phi.ncols());
        xi_m[1] += cfg.industry_loading;
        let scale_m = x_phi.apply(&zeta_m)?;
        if scale_m.iter().any(|s| !(*s >= 0.0)) {
            continue;
        }
        let loc_m = x_phi.apply(&xi_m)?;
        let market: Vec<f64> = loc_m.iter().zip(&scale_m).map(|(l, s)| l + s * noise.sample(&mut rng)).collect();
        let dates = (0..cfg.periods).map(|t| t.to_string()).collect();
        let names = (0..cfg.state_dim).map(|j| format!("z{}", j + 1)).collect();
        return Ok(SyntheticPanel {
            panel: Panel::new(dates, market, industry, z, names)?,
            xi_industry: xi_i,
            zeta_industry: zeta_i,
            xi_market: xi_m,
            zeta_market: zeta_m,
        });
    }
    Err(Error::InvalidArgument("no synthetic panel with nonnegative scale".into()))
}
