//! Chebyshev feature dictionaries and the scaled design matrix.
//!
//! Every raw regressor `S_i` is mapped onto `[-1, 1]` through its approximation
//! interval and expanded into the Chebyshev polynomials `T_1, ..., T_K`. Columns
//! are laid out as
//!
//! ```text
//! [1 | T_1(S_1) .. T_K(S_1) | T_1(S_2) .. T_K(S_2) | ... | T_1(S_d) .. T_K(S_d)]
//! ```
//!
//! so the design has `p = 1 + d * K` columns and column `1 + i * K + (k - 1)`
//! holds degree `k` of raw regressor `i` (zero based `i`).
//!
//! Values outside the interval are handled by the hyperbolic continuation of
//! the polynomials, which lets a dictionary fitted on a training window be
//! applied unchanged to later data.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval `[a, b]` with `a < b` used to rescale one raw regressor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproximationInterval {
    pub a: f64,
    pub b: f64,
}

impl ApproximationInterval {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "interval endpoints must be finite, got [{a}, {b}]"
            )));
        }
        if a >= b {
            return Err(Error::InvalidArgument(format!(
                "interval requires a < b, got [{a}, {b}]"
            )));
        }
        Ok(Self { a, b })
    }

    /// Sample range of a column. Constant columns are rejected.
    pub fn from_column(values: impl IntoIterator<Item = f64>, column: usize) -> Result<Self> {
        let (lo, hi) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "column {column} is empty or contains non-finite values"
            )));
        }
        if lo >= hi {
            return Err(Error::DegenerateInterval { column, value: lo });
        }
        Ok(Self { a: lo, b: hi })
    }
}

/// Affine map sending `a` to -1 and `b` to +1.
#[inline]
pub fn rescale_to_interval(s: f64, interval: &ApproximationInterval) -> f64 {
    (2.0 * s - interval.a - interval.b) / (interval.b - interval.a)
}

/// Chebyshev polynomial of the first kind, `T_k(x)`, on the whole real line.
///
/// Inside `[-1, 1]` this is `cos(k acos x)`; outside it uses
/// `cosh(k acosh |x|)` with the sign `(-1)^k` on the negative side.
pub fn chebyshev_value(k: u32, x: f64) -> f64 {
    match k {
        0 => return 1.0,
        1 => return x,
        _ => {}
    }
    let kf = f64::from(k);
    if x.abs() <= 1.0 {
        (kf * x.acos()).cos()
    } else if x > 1.0 {
        (kf * x.acosh()).cosh()
    } else {
        let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
        sign * (kf * (-x).acosh()).cosh()
    }
}

/// Root mean square of a column, `sqrt(mean(x^2))`.
pub fn column_scale(column: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = column
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Regressor matrix together with the penalty weights of the `||.||_{1,T}` norm.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    has_intercept: bool,
    scales: Vec<f64>,
}

impl DesignMatrix {
    /// Wraps a `T x p` matrix. When `has_intercept` is set, column 0 must be all ones.
    pub fn new(values: DMatrix<f64>, has_intercept: bool) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "design matrix contains non-finite values".into(),
            ));
        }
        if has_intercept
            && (values.ncols() == 0 || values.column(0).iter().any(|&v| v != 1.0)) {
                return Err(Error::InvalidArgument(
                    "intercept column must be all ones".into(),
                ));
            }
        let mut scales: Vec<f64> = values
            .column_iter()
            .map(|c| column_scale(c.iter().copied()))
            .collect();
        if has_intercept {
            scales[0] = 1.0;
        }
        Ok(Self {
            values,
            has_intercept,
            scales,
        })
    }

    /// Prepends a column of ones to `raw`.
    pub fn with_intercept(raw: &DMatrix<f64>) -> Result<Self> {
        let t = raw.nrows();
        let mut values = DMatrix::zeros(t, raw.ncols() + 1);
        values.column_mut(0).fill(1.0);
        values.columns_mut(1, raw.ncols()).copy_from(raw);
        Self::new(values, true)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn has_intercept(&self) -> bool {
        self.has_intercept
    }

    /// Penalty weights `sigma_i = sqrt(T^-1 sum_t X_it^2)`.
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Rows `idx` as a new design; scales are recomputed on the subsample.
    pub fn select_rows(&self, idx: &[usize]) -> DesignMatrix {
        let values = self.values.select_rows(idx.iter());
        let mut scales: Vec<f64> = values
            .column_iter()
            .map(|c| column_scale(c.iter().copied()))
            .collect();
        if self.has_intercept {
            scales[0] = 1.0;
        }
        DesignMatrix {
            values,
            has_intercept: self.has_intercept,
            scales,
        }
    }

    /// Contiguous rows `start..end`.
    pub fn row_range(&self, start: usize, end: usize) -> DesignMatrix {
        let idx: Vec<usize> = (start..end).collect();
        self.select_rows(&idx)
    }

    /// `X b`.
    pub fn apply(&self, coefficients: &[f64]) -> Result<Vec<f64>> {
        if coefficients.len() != self.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.ncols(),
                got: coefficients.len(),
            });
        }
        let mut out = vec![0.0; self.nrows()];
        for (j, &b) in coefficients.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(self.values.column(j).iter()) {
                *o += x * b;
            }
        }
        Ok(out)
    }

    /// Weighted l1 norm `sum_i sigma_i |b_i|`.
    pub fn weighted_l1(&self, coefficients: &[f64]) -> f64 {
        self.scales
            .iter()
            .zip(coefficients)
            .map(|(s, b)| s * b.abs())
            .sum()
    }
}

/// Frozen Chebyshev expansion: degree, one interval per raw regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChebyshevDictionary {
    pub degree: u32,
    pub intervals: Vec<ApproximationInterval>,
    /// Names of the raw regressors, in column order.
    #[serde(default)]
    pub names: Vec<String>,
}

impl ChebyshevDictionary {
    /// Uses the sample range of every raw column as its interval.
    pub fn fit(raw: &DMatrix<f64>, degree: u32) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidArgument("degree must be positive".into()));
        }
        if raw.nrows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 rows to fit a dictionary, got {}",
                raw.nrows()
            )));
        }
        let intervals = raw
            .column_iter()
            .enumerate()
            .map(|(i, c)| ApproximationInterval::from_column(c.iter().copied(), i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            degree,
            intervals,
            names: Vec::new(),
        })
    }

    pub fn with_intervals(degree: u32, intervals: Vec<ApproximationInterval>) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidArgument("degree must be positive".into()));
        }
        for iv in &intervals {
            ApproximationInterval::new(iv.a, iv.b)?;
        }
        Ok(Self {
            degree,
            intervals,
            names: Vec::new(),
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        self.names = names;
        self
    }

    pub fn raw_dim(&self) -> usize {
        self.intervals.len()
    }

    /// `1 + d K`.
    pub fn output_dim(&self) -> usize {
        1 + self.raw_dim() * self.degree as usize
    }

    /// Column index of degree `k` (1-based) for raw regressor `i` (0-based).
    pub fn column_index(&self, raw: usize, k: u32) -> usize {
        1 + raw * self.degree as usize + (k as usize - 1)
    }

    pub fn column_labels(&self) -> Vec<String> {
        let mut labels = Vec::with_capacity(self.output_dim());
        labels.push("intercept".to_string());
        for i in 0..self.raw_dim() {
            let name = self
                .names
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("s{}", i + 1));
            for k in 1..=self.degree {
                labels.push(format!("T{k}({name})"));
            }
        }
        labels
    }

    /// Expands one row of raw regressors into `out` (length `output_dim`).
    pub fn expand_row(&self, raw: &[f64], out: &mut [f64]) -> Result<()> {
        if raw.len() != self.raw_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.raw_dim(),
                got: raw.len(),
            });
        }
        if out.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: out.len(),
            });
        }
        out[0] = 1.0;
        let kmax = self.degree as usize;
        for (i, (&s, iv)) in raw.iter().zip(&self.intervals).enumerate() {
            let x = rescale_to_interval(s, iv);
            for k in 1..=kmax {
                out[1 + i * kmax + k - 1] = chebyshev_value(k as u32, x);
            }
        }
        Ok(())
    }

    /// Raw Chebyshev values, no shift or standardisation.
    pub fn transform(&self, raw: &DMatrix<f64>) -> Result<DesignMatrix> {
        if raw.ncols() != self.raw_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.raw_dim(),
                got: raw.ncols(),
            });
        }
        let t = raw.nrows();
        let p = self.output_dim();
        let kmax = self.degree as usize;
        let mut values = DMatrix::zeros(t, p);
        values.column_mut(0).fill(1.0);
        for (i, iv) in self.intervals.iter().enumerate() {
            for r in 0..t {
                let x = rescale_to_interval(raw[(r, i)], iv);
                for k in 1..=kmax {
                    values[(r, 1 + i * kmax + k - 1)] = chebyshev_value(k as u32, x);
                }
            }
        }
        DesignMatrix::new(values, true)
    }
}

/// Fits intervals (unless given) and expands `raw` into a Chebyshev design.
pub fn build_dictionary(
    raw: &DMatrix<f64>,
    degree: u32,
    intervals: Option<Vec<ApproximationInterval>>,
) -> Result<(ChebyshevDictionary, DesignMatrix)> {
    let dict = match intervals {
        Some(iv) => {
            if iv.len() != raw.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: raw.ncols(),
                    got: iv.len(),
                });
            }
            ChebyshevDictionary::with_intervals(degree, iv)?
        }
        None => ChebyshevDictionary::fit(raw, degree)?,
    };
    let design = dict.transform(raw)?;
    Ok((dict, design))
}

/// Simulation variant of the dictionary: every non-intercept column is
/// `(T_k + 1) / sd`, with `sd` the standard deviation of `T_k + 1`.
///
/// Pass the returned divisors back in to transform further data identically.
/// The intercept divisor is 1.
pub fn simulation_dictionary(
    raw: &DMatrix<f64>,
    degree: u32,
    scale_divisors: Option<&[f64]>,
) -> Result<(DesignMatrix, Vec<f64>)> {
    let dict = ChebyshevDictionary::fit(raw, degree)?;
    let base = dict.transform(raw)?;
    let mut values = base.values().clone();
    let t = values.nrows() as f64;
    let p = values.ncols();
    let divisors = match scale_divisors {
        Some(d) => {
            if d.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: d.len(),
                });
            }
            d.to_vec()
        }
        None => {
            let mut d = vec![1.0; p];
            for j in 1..p {
                let col = values.column(j);
                let mean = col.iter().map(|v| v + 1.0).sum::<f64>() / t;
                let var = col
                    .iter()
                    .map(|v| (v + 1.0 - mean).powi(2))
                    .sum::<f64>()
                    / t;
                if !(var > 1e-24) {
                    return Err(Error::ZeroVariance { column: j });
                }
                d[j] = var.sqrt();
            }
            d
        }
    };
    for j in 1..p {
        if !(divisors[j] > 0.0) {
            return Err(Error::ZeroVariance { column: j });
        }
        for v in values.column_mut(j).iter_mut() {
            *v = (*v + 1.0) / divisors[j];
        }
    }
    Ok((DesignMatrix::new(values, true)?, divisors))
}
