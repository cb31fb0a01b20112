//! Blocking strategies and an empirical study of the Fuk-Nagaev tail bound
//!
//! ```text
//! P(max_i |T^-1 sum_t w_ti| > u)
//!     <= 3 p a (C1 / (u^q d^(q-1)) + exp(-C2 u^2 d)) + 2 p d beta(a)
//! ```
//!
//! for p-dimensional beta-mixing sequences split into `2d` blocks of length `a`.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulation::replication_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockingStrategy {
    /// Block length.
    pub a: usize,
    /// Number of block pairs.
    pub d: usize,
    pub t: usize,
}

impl BlockingStrategy {
    pub fn new(a: usize, d: usize, t: usize) -> Result<Self> {
        if a == 0 || d == 0 || 2 * a * d > t {
            return Err(Error::InvalidArgument(format!(
                "blocking needs a, d >= 1 and 2ad <= T, got a = {a}, d = {d}, T = {t}"
            )));
        }
        Ok(Self { a, d, t })
    }
}

/// `ceil(x)`, treating values within `1e-9` (relative) of an integer as that
/// integer so that e.g. `1000^(1/3)` gives 10.
fn stable_ceil(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// `a = ceil(T^(1/(1+mu')))`, `d = floor(T / (2a))`; `d` may be zero.
pub fn rate_parameters(t: usize, mu_prime: f64) -> Result<(usize, usize)> {
    if t < 2 {
        return Err(Error::InvalidArgument(format!("T must be at least 2, got {t}")));
    }
    if !(mu_prime > 0.0 && mu_prime.is_finite()) {
        return Err(Error::InvalidArgument(format!("mu' must be positive, got {mu_prime}")));
    }
    let a = stable_ceil((t as f64).powf(1.0 / (1.0 + mu_prime))).max(1);
    Ok((a, t / (2 * a)))
}

pub fn blocking_from_rate(t: usize, mu_prime: f64) -> Result<BlockingStrategy> {
    let (a, d) = rate_parameters(t, mu_prime)?;
    BlockingStrategy::new(a, d, t)
}

/// Block index sets (0-based, half-open).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockIndices {
    pub h: Vec<Range<usize>>,
    pub g: Vec<Range<usize>>,
    pub q: Range<usize>,
}

pub fn block_indices(bs: &BlockingStrategy) -> BlockIndices {
    let a = bs.a;
    let h = (0..bs.d).map(|j| 2 * j * a..(2 * j + 1) * a).collect();
    let g = (0..bs.d).map(|j| (2 * j + 1) * a..(2 * j + 2) * a).collect();
    BlockIndices {
        h,
        g,
        q: 2 * bs.d * a..bs.t,
    }
}

/// Constants of the bound, with `beta(a) = beta_scale * beta_rate^a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub c1: f64,
    pub c2: f64,
    pub beta_scale: f64,
}

/// Raw value of the bound; may exceed 1.
pub fn fuk_nagaev_bound(u: f64, p: usize, bs: &BlockingStrategy, q: f64, c1: f64, c2: f64, beta_a: f64) -> f64 {
    let (a, d, p) = (bs.a as f64, bs.d as f64, p as f64);
    3.0 * p * a * (c1 / (u.powf(q) * d.powf(q - 1.0)) + (-c2 * u * u * d).exp()) + 2.0 * p * d * beta_a
}

/// The bound as a probability.
pub fn fuk_nagaev_probability(u: f64, p: usize, bs: &BlockingStrategy, q: f64, c1: f64, c2: f64, beta_a: f64) -> f64 {
    fuk_nagaev_bound(u, p, bs, q, c1, c2, beta_a).min(1.0)
}

/// How the polynomial and exponential thresholds are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    Min,
    Max,
}

impl Combine {
    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            Combine::Min => x.min(y),
            Combine::Max => x.max(y),
        }
    }
}

/// `C3 (p a / delta)^(1/q) / d^((q-1)/q)` combined with `C4 sqrt(log(p a / delta) / d)`.
#[allow(clippy::too_many_arguments)]
pub fn threshold_for_confidence(
    delta: f64,
    p: usize,
    bs: &BlockingStrategy,
    q: f64,
    c3: f64,
    c4: f64,
    combine: Combine,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    let (a, d) = (bs.a as f64, bs.d as f64);
    let m = p as f64 * a / delta;
    let poly = c3 * m.powf(1.0 / q) / d.powf((q - 1.0) / q);
    let expo = c4 * (m.ln() / d).sqrt();
    Ok(combine.apply(poly, expo))
}

/// Rate of the theoretical penalty, `(p a)^(2/q) / d^((q-1)/q)` combined with
/// `sqrt(log(p a) / d)`. Diagnostic only.
pub fn penalty_rate(p: usize, bs: &BlockingStrategy, q: f64, combine: Combine) -> f64 {
    let (a, d) = (bs.a as f64, bs.d as f64);
    let m = p as f64 * a;
    combine.apply(m.powf(2.0 / q) / d.powf((q - 1.0) / q), (m.ln() / d).sqrt())
}

/// Stationary centred p-dimensional AR(1) with unit marginal variance and
/// independent coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ar1Generator {
    pub rho: f64,
}

impl Ar1Generator {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!("|rho| must be below 1, got {rho}")));
        }
        Ok(Self { rho })
    }

    /// Column means `T^-1 sum_t w_ti` of one draw.
    pub fn sample_means<R: Rng + ?Sized>(&self, p: usize, t: usize, rng: &mut R) -> Vec<f64> {
        let innov = (1.0 - self.rho * self.rho).sqrt();
        (0..p)
            .map(|_| {
                let mut w: f64 = rng.sample(StandardNormal);
                let mut sum = 0.0;
                for step in 0..t {
                    if step > 0 {
                        let e: f64 = rng.sample(StandardNormal);
                        w = self.rho * w + innov * e;
                    }
                    sum += w;
                }
                sum / t as f64
            })
            .collect()
    }

    /// Geometric decay rate used for `beta(a)`.
    pub fn beta_rate(&self) -> f64 {
        self.rho.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailExperimentConfig {
    pub rho: f64,
    pub p: usize,
    pub t: usize,
    pub reps: usize,
    pub u_grid: Vec<f64>,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default = "default_mu_prime")]
    pub mu_prime: f64,
    pub seed: u64,
}

fn default_q() -> f64 {
    2.0
}

fn default_mu_prime() -> f64 {
    1.0
}

/// Exceedances below this count are flagged as unreliable.
pub const MIN_EXCEEDANCES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridRole {
    Fit,
    Validate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub u: f64,
    pub empirical: f64,
    pub bound: f64,
    /// `empirical / bound`.
    pub ratio: f64,
    pub smoothed: f64,
    pub se: f64,
    pub exceedances: usize,
    pub low_count: bool,
    pub role: GridRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailExperiment {
    pub config: TailExperimentConfig,
    pub blocking: BlockingStrategy,
    pub constants: BoundConstants,
    pub rows: Vec<TailRow>,
}

impl TailExperiment {
    /// Held-out grid points where the bound falls below the empirical tail.
    pub fn validation_violations(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.role == GridRole::Validate && r.bound < r.empirical)
            .map(|r| r.u)
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "u", "empirical", "bound", "ratio", "smoothed", "se", "exceedances", "low_count", "role",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.u.to_string(),
                r.empirical.to_string(),
                r.bound.to_string(),
                r.ratio.to_string(),
                r.smoothed.to_string(),
                r.se.to_string(),
                r.exceedances.to_string(),
                r.low_count.to_string(),
                match r.role {
                    GridRole::Fit => "fit".into(),
                    GridRole::Validate => "validate".into(),
                },
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pool-adjacent-violators fit of a nonincreasing sequence (equal weights).
pub fn isotonic_nonincreasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 >= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().unwrap() = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    blocks.into_iter().flat_map(|(m, n)| std::iter::repeat_n(m, n)).collect()
}

/// `max_i |mean_i|` for every replication, in replication order.
pub fn simulate_max_means(gen: &Ar1Generator, p: usize, t: usize, reps: usize, seed: u64) -> Vec<f64> {
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = replication_rng(seed, r);
            gen.sample_means(p, t, &mut rng)
                .into_iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
        })
        .collect()
}

/// Empirical tail probabilities on `u_grid` with a fitted bound.
///
/// Even grid positions fit the constants, odd positions validate them. The
/// fit keeps the bound above `empirical + 3 se` on the fitting points and
/// makes it as tight as possible there (smallest worst-case
/// `log(bound / empirical)`).
pub fn empirical_tail_experiment(cfg: &TailExperimentConfig) -> Result<TailExperiment> {
    if cfg.u_grid.is_empty() {
        return Err(Error::InvalidArgument("u grid is empty".into()));
    }
    if cfg.u_grid.iter().any(|u| !(*u > 0.0 && u.is_finite())) {
        return Err(Error::InvalidArgument("u grid values must be positive".into()));
    }
    if cfg.u_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("u grid must be strictly increasing".into()));
    }
    if cfg.reps == 0 || cfg.p == 0 {
        return Err(Error::InvalidArgument("reps and p must be positive".into()));
    }
    if !(cfg.q >= 2.0) {
        return Err(Error::InvalidArgument(format!("q must be at least 2, got {}", cfg.q)));
    }
    let gen = Ar1Generator::new(cfg.rho)?;
    let bs = blocking_from_rate(cfg.t, cfg.mu_prime)?;
    let stats = simulate_max_means(&gen, cfg.p, cfg.t, cfg.reps, cfg.seed);
    let n = cfg.reps as f64;
    let counts: Vec<usize> = cfg
        .u_grid
        .iter()
        .map(|&u| stats.iter().filter(|&&s| s > u).count())
        .collect();
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let smoothed = isotonic_nonincreasing(&empirical);
    let se: Vec<f64> = empirical.iter().map(|&e| (e * (1.0 - e) / n).sqrt()).collect();
    let roles: Vec<GridRole> = (0..cfg.u_grid.len())
        .map(|i| if i % 2 == 0 { GridRole::Fit } else { GridRole::Validate })
        .collect();

    let fit_idx: Vec<usize> = (0..cfg.u_grid.len()).filter(|&i| roles[i] == GridRole::Fit).collect();
    let constants = fit_constants(
        &fit_idx.iter().map(|&i| cfg.u_grid[i]).collect::<Vec<_>>(),
        &fit_idx.iter().map(|&i| empirical[i]).collect::<Vec<_>>(),
        &fit_idx.iter().map(|&i| se[i] + 1.0 / n).collect::<Vec<_>>(),
        cfg.p,
        &bs,
        cfg.q,
        gen.beta_rate(),
    );
    let beta_a = constants.beta_scale * gen.beta_rate().powi(bs.a as i32);
    let rows = cfg
        .u_grid
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let bound = fuk_nagaev_bound(u, cfg.p, &bs, cfg.q, constants.c1, constants.c2, beta_a);
            TailRow {
                u,
                empirical: empirical[i],
                bound,
                ratio: empirical[i] / bound,
                smoothed: smoothed[i],
                se: se[i],
                exceedances: counts[i],
                low_count: counts[i] < MIN_EXCEEDANCES,
                role: roles[i],
            }
        })
        .collect();
    Ok(TailExperiment {
        config: cfg.clone(),
        blocking: bs,
        constants,
        rows,
    })
}

/// Grid search over `(c2, beta_scale)`; `c1` is the smallest value keeping the
/// bound above `empirical + 3 noise` at every point.
fn fit_constants(
    u: &[f64],
    empirical: &[f64],
    noise: &[f64],
    p: usize,
    bs: &BlockingStrategy,
    q: f64,
    beta_rate: f64,
) -> BoundConstants {
    let (a, d, pf) = (bs.a as f64, bs.d as f64, p as f64);
    let target: Vec<f64> = empirical.iter().zip(noise).map(|(e, s)| e + 3.0 * s).collect();
    let poly_unit: Vec<f64> = u.iter().map(|&x| 3.0 * pf * a / (x.powf(q) * d.powf(q - 1.0))).collect();
    // c2 on a log grid scaled so that exp(-c2 u^2 d) spans the grid's range.
    let umid = u[u.len() / 2];
    let c2_base = 1.0 / (umid * umid * d);
    let c2_grid: Vec<f64> = (-40..=40).map(|k| c2_base * 10f64.powf(k as f64 / 10.0)).collect();
    let beta_unit = 2.0 * pf * d * beta_rate.powf(a);
    let mut scale_grid = vec![0.0];
    if beta_unit > 0.0 {
        let top = target.iter().cloned().fold(0.0, f64::max).max(1e-12) / beta_unit;
        scale_grid.extend((0..=40).map(|k| top * 10f64.powf(-(k as f64) / 5.0)));
    }
    let mut best = (f64::INFINITY, BoundConstants { c1: 0.0, c2: c2_base, beta_scale: 0.0 });
    for &c2 in &c2_grid {
        let expo: Vec<f64> = u.iter().map(|&x| 3.0 * pf * a * (-c2 * x * x * d).exp()).collect();
        for &c in &scale_grid {
            let floor = c * beta_unit;
            let c1 = (0..u.len())
                .map(|i| (target[i] - expo[i] - floor) / poly_unit[i])
                .fold(0.0f64, f64::max);
            let worst = (0..u.len())
                .filter(|&i| empirical[i] > 0.0)
                .map(|i| ((c1 * poly_unit[i] + expo[i] + floor) / empirical[i]).ln())
                .fold(f64::NEG_INFINITY, f64::max);
            let worst = if worst.is_finite() {
                worst
            } else {
                (0..u.len()).map(|i| c1 * poly_unit[i] + expo[i] + floor).fold(0.0, f64::max)
            };
            if worst < best.0 {
                best = (worst, BoundConstants { c1, c2, beta_scale: c });
            }
        }
    }
    best.1
}
