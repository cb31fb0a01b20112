//! Location-scale simulation design and Monte Carlo harness.
//!
//! ```text
//! Y_t = X_t' xi + (X_t' zeta) nu_t,   nu_t ~ N(0, sigma_nu^2)
//! ```
//!
//! where `X_t` is the shifted and standardised Chebyshev expansion of an
//! AR(1) factor process `Z_t`.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StatNormal};

use crate::error::{Error, Result};
use crate::es::{self, EsSolver};
use crate::features::{simulation_dictionary, DesignMatrix};
use crate::linalg::norm1;
use crate::model_selection::{es_mse, mean_tick_loss, two_stage_cv, CvOptions};
use crate::quantile::QuantileSolver;

const MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Estimation sample size; `2t` periods are drawn.
    pub t: usize,
    /// Number of raw regressors.
    pub d: usize,
    /// Chebyshev degree.
    pub degree: u32,
    /// Nonzeros in each of `xi` and `zeta`.
    pub s0: usize,
    pub tau: f64,
    pub sigma_nu: f64,
    pub rho: f64,
    pub theta: f64,
    pub seed: u64,
    #[serde(default)]
    pub cv: CvOptions,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            t: 500,
            d: 7,
            degree: 3,
            s0: 2,
            tau: 0.1,
            sigma_nu: 1.0,
            rho: 0.5,
            theta: 0.15,
            seed: 0,
            cv: CvOptions::default(),
        }
    }
}

impl SimulationConfig {
    pub fn p(&self) -> usize {
        1 + self.d * self.degree as usize
    }

    /// Size of the pool the supports are drawn from: the transforms of the
    /// first three raw regressors.
    pub fn relevant_pool(&self) -> usize {
        self.d.min(3) * self.degree as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.t < 10 {
            return bad(format!("t must be at least 10, got {}", self.t));
        }
        if self.d == 0 || self.degree == 0 {
            return bad("d and degree must be positive".into());
        }
        if self.s0 == 0 || 2 * self.s0 > self.relevant_pool() {
            return bad(format!(
                "need 1 <= s0 and 2 s0 <= {}, got s0 = {}",
                self.relevant_pool(),
                self.s0
            ));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.sigma_nu > 0.0 && self.sigma_nu.is_finite()) {
            return bad(format!("sigma_nu must be positive, got {}", self.sigma_nu));
        }
        if !(self.rho.abs() < 1.0) {
            return bad(format!("|rho| must be below 1, got {}", self.rho));
        }
        if !(0.0..1.0).contains(&self.theta) {
            return bad(format!("theta must lie in [0, 1), got {}", self.theta));
        }
        Ok(())
    }
}

/// `n` periods of the factor process, started from its stationary law:
///
/// ```text
/// Z_it = rho Z_i,t-1 + sqrt(theta) F_t + sqrt(1 - theta) psi_it,
/// F_t, psi_it ~ N(0, 1 - rho^2)
/// ```
pub fn simulate_factors_with_rng<R: Rng + ?Sized>(
    cfg: &SimulationConfig,
    n: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let d = cfg.d;
    let (a, b) = (cfg.theta.sqrt(), (1.0 - cfg.theta).sqrt());
    let innov = (1.0 - cfg.rho * cfg.rho).sqrt();
    let mut z = DMatrix::zeros(n, d);
    let mut prev = vec![0.0; d];
    let g: f64 = rng.sample(StandardNormal);
    for v in prev.iter_mut() {
        let h: f64 = rng.sample(StandardNormal);
        *v = a * g + b * h;
    }
    for t in 0..n {
        let f: f64 = rng.sample::<f64, _>(StandardNormal) * innov;
        for (i, v) in prev.iter_mut().enumerate() {
            let psi: f64 = rng.sample::<f64, _>(StandardNormal) * innov;
            *v = cfg.rho * *v + a * f + b * psi;
            z[(t, i)] = *v;
        }
    }
    z
}

pub fn simulate_factors(cfg: &SimulationConfig, n: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    simulate_factors_with_rng(cfg, n, &mut rng)
}

/// Standard normal `tau`-quantile.
pub fn normal_quantile(tau: f64) -> f64 {
    StatNormal::standard().inverse_cdf(tau)
}

/// `E[nu | nu <= Q(tau)]` for `nu ~ N(0, sigma^2)`, i.e. `-sigma phi(z_tau) / tau`.
pub fn truncated_normal_mean(tau: f64, sigma: f64) -> f64 {
    let n = StatNormal::standard();
    -sigma * n.pdf(n.inverse_cdf(tau)) / tau
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSample {
    /// `2t` responses.
    pub y: Vec<f64>,
    pub x: DesignMatrix,
    pub xi: Vec<f64>,
    pub zeta: Vec<f64>,
    /// Supports in draw order (0-based column indices).
    pub s_xi: Vec<usize>,
    pub s_zeta: Vec<usize>,
    pub alpha0: Vec<f64>,
    pub gamma0: Vec<f64>,
    /// Column divisors of the standardised dictionary.
    pub divisors: Vec<f64>,
    /// Paths discarded because the scale process was not positive.
    pub retries: usize,
}

impl SimulatedSample {
    pub fn t(&self) -> usize {
        self.y.len() / 2
    }

    pub fn train(&self) -> (DesignMatrix, &[f64]) {
        let t = self.t();
        (self.x.row_range(0, t), &self.y[..t])
    }

    pub fn test(&self) -> (DesignMatrix, &[f64]) {
        let t = self.t();
        (self.x.row_range(t, 2 * t), &self.y[t..])
    }

    /// True conditional quantiles `X_t' alpha0`.
    pub fn true_quantiles(&self) -> Result<Vec<f64>> {
        self.x.apply(&self.alpha0)
    }

    pub fn true_es(&self) -> Result<Vec<f64>> {
        self.x.apply(&self.gamma0)
    }
}

pub fn simulate_dgp(cfg: &SimulationConfig) -> Result<SimulatedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    simulate_dgp_with_rng(cfg, &mut rng)
}

pub fn simulate_dgp_with_rng<R: Rng + ?Sized>(cfg: &SimulationConfig, rng: &mut R) -> Result<SimulatedSample> {
    cfg.validate()?;
    let p = cfg.p();
    let n = 2 * cfg.t;
    let z_tau = normal_quantile(cfg.tau);
    let es_shift = truncated_normal_mean(cfg.tau, cfg.sigma_nu);
    let noise = Normal::new(0.0, cfg.sigma_nu).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    for retries in 0..=MAX_RETRIES {
        let z = simulate_factors_with_rng(cfg, n, rng);
        let (x, divisors) = match simulation_dictionary(&z, cfg.degree, None) {
            Ok(v) => v,
            Err(Error::ZeroVariance { .. }) | Err(Error::DegenerateInterval { .. }) => continue,
            Err(e) => return Err(e),
        };
        let draws = rand::seq::index::sample(rng, cfg.relevant_pool(), 2 * cfg.s0).into_vec();
        let s_xi: Vec<usize> = draws[..cfg.s0].iter().map(|i| i + 1).collect();
        let s_zeta: Vec<usize> = draws[cfg.s0..].iter().map(|i| i + 1).collect();
        let mut xi = vec![0.0; p];
        let mut zeta = vec![0.0; p];
        for (i, (&a, &b)) in s_xi.iter().zip(&s_zeta).enumerate() {
            xi[a] = 1.0 / (2.0 + i as f64);
            zeta[b] = 1.0 / (2.0 + i as f64);
        }
        let loc = x.apply(&xi)?;
        let scale = x.apply(&zeta)?;
        if scale.iter().any(|&s| !(s > 0.0)) {
            continue;
        }
        let y = loc
            .iter()
            .zip(&scale)
            .map(|(l, s)| l + s * noise.sample(rng))
            .collect();
        let alpha0 = xi
            .iter()
            .zip(&zeta)
            .map(|(a, b)| a + b * cfg.sigma_nu * z_tau)
            .collect();
        let gamma0 = xi.iter().zip(&zeta).map(|(a, b)| a + b * es_shift).collect();
        return Ok(SimulatedSample {
            y,
            x,
            xi,
            zeta,
            s_xi,
            s_zeta,
            alpha0,
            gamma0,
            divisors,
            retries,
        });
    }
    Err(Error::InvalidArgument(format!(
        "no path with a positive scale process after {MAX_RETRIES} retries"
    )))
}

/// Errors of one replication. Losses are per observation on the test half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub alpha_error: f64,
    pub gamma_error: f64,
    pub mtl: f64,
    pub es_mse: f64,
    pub nu: f64,
    pub lambda: f64,
    pub retries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanSe { mean: f64::NAN, se: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let se = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        MeanSe { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub config: SimulationConfig,
    pub penalized: bool,
    pub replications: usize,
    pub failures: Vec<(usize, String)>,
    pub alpha_error: MeanSe,
    pub gamma_error: MeanSe,
    pub mtl: MeanSe,
    pub es_mse: MeanSe,
    pub records: Vec<ReplicationRecord>,
}

impl MonteCarloSummary {
    pub fn write_summary_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "estimator", "degree", "sigma_nu", "t", "tau", "metric", "mean", "se", "completed", "failed",
        ])?;
        let name = if self.penalized { "penalized" } else { "unpenalized" };
        for (metric, v) in [
            ("alpha_l1_error", self.alpha_error),
            ("gamma_l1_error", self.gamma_error),
            ("mtl", self.mtl),
            ("es_mse", self.es_mse),
        ] {
            w.write_record([
                name.to_string(),
                self.config.degree.to_string(),
                self.config.sigma_nu.to_string(),
                self.config.t.to_string(),
                self.config.tau.to_string(),
                metric.to_string(),
                v.mean.to_string(),
                v.se.to_string(),
                self.records.len().to_string(),
                self.failures.len().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_records_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Random stream of replication `r`: the base seed with its own ChaCha stream.
pub fn replication_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

/// Runs one replication: estimation on the first half, losses on the second.
pub fn run_replication(cfg: &SimulationConfig, r: usize, penalized: bool) -> Result<ReplicationRecord> {
    let mut rng = replication_rng(cfg.seed, r);
    let sample = simulate_dgp_with_rng(cfg, &mut rng)?;
    let (x_train, y_train) = sample.train();
    let (x_test, y_test) = sample.test();
    let q_solver = QuantileSolver::default();
    let e_solver = EsSolver::default();
    let (nu, lambda) = if penalized {
        let sel = two_stage_cv(&x_train, y_train, cfg.tau, &cfg.cv, &q_solver, &e_solver)?;
        (sel.nu, sel.lambda)
    } else {
        (0.0, 0.0)
    };
    let q_fit = q_solver
        .fit(&x_train, y_train, cfg.tau, nu)
        .map_err(|e| Error::Stage { stage: "quantile", source: Box::new(e) })?;
    let aux = es::auxiliary_response(y_train, &q_fit.predict(&x_train)?, cfg.tau)?;
    let e_fit = e_solver
        .fit(&x_train, &aux, lambda)
        .map_err(|e| Error::Stage { stage: "es", source: Box::new(e) })?;

    let diff1 = |a: &[f64], b: &[f64]| norm1(&a.iter().zip(b).map(|(u, v)| u - v).collect::<Vec<_>>());
    let q_test = q_fit.predict(&x_test)?;
    let e_test = e_fit.predict(&x_test)?;
    Ok(ReplicationRecord {
        replication: r,
        alpha_error: diff1(&q_fit.coefficients, &sample.alpha0),
        gamma_error: diff1(&e_fit.coefficients, &sample.gamma0),
        mtl: mean_tick_loss(y_test, &q_test, cfg.tau)?.mean,
        es_mse: es_mse(y_test, &q_test, &e_test, cfg.tau)?.mean,
        nu,
        lambda,
        retries: sample.retries,
    })
}

/// Replications run in parallel; results do not depend on scheduling.
pub fn run_monte_carlo(cfg: &SimulationConfig, reps: usize, penalized: bool) -> Result<MonteCarloSummary> {
    cfg.validate()?;
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    let outcomes: Vec<Result<ReplicationRecord>> = (0..reps)
        .into_par_iter()
        .map(|r| run_replication(cfg, r, penalized))
        .collect();
    let mut records = Vec::with_capacity(reps);
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    let col = |f: fn(&ReplicationRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    Ok(MonteCarloSummary {
        config: cfg.clone(),
        penalized,
        replications: reps,
        alpha_error: MeanSe::of(&col(|r| r.alpha_error)),
        gamma_error: MeanSe::of(&col(|r| r.gamma_error)),
        mtl: MeanSe::of(&col(|r| r.mtl)),
        es_mse: MeanSe::of(&col(|r| r.es_mse)),
        failures,
        records,
    })
}
