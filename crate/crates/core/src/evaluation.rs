//! Forecast scoring: pinball loss and its CRPS approximation, point errors,
//! Kupiec unconditional coverage and one-sided Diebold-Mariano tests.

use std::io::Write;

use thiserror::Error;

use crate::distributions::{percentile_grid, DistError, DistSpec};
use crate::matrix::Matrix;
use crate::scalar::{lit, Scalar};
use crate::special::{chi2_sf, norm_cdf};

pub const DM_MIN_DAYS: usize = 30;
pub const KUPIEC_ALPHA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("no observations to score")]
    Empty,
    #[error("invalid counts: {hits} hits out of {n}")]
    Counts { hits: usize, n: usize },
    #[error("coverage {0} outside (0, 1)")]
    Coverage(f64),
    #[error("Diebold-Mariano test needs at least {DM_MIN_DAYS} days, got {0}")]
    TooShort(usize),
    #[error("loss differential has zero variance")]
    Degenerate,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Pinball loss of quantile forecast `q_hat` at level `q`.
#[inline]
pub fn pinball<T: Scalar>(q_hat: T, y: T, q: T) -> T {
    if y < q_hat {
        (T::one() - q) * (q_hat - y)
    } else {
        q * (y - q_hat)
    }
}

/// Mean pinball loss over the 99-point percentile grid.
pub fn crps_from_quantiles<T: Scalar>(quantiles: &[T], y: T) -> T {
    let grid = percentile_grid::<T>();
    let total: T = quantiles
        .iter()
        .zip(&grid)
        .map(|(&qh, &q)| pinball(qh, y, q))
        .sum();
    total / T::from_usize_lossy(grid.len())
}

/// CRPS approximated by the average pinball loss on the percentile grid.
pub fn crps_approx<T: Scalar>(f: &DistSpec<T>, y: T) -> Result<T> {
    Ok(crps_from_quantiles(&f.percentiles()?, y))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointScores {
    pub mae: f64,
    pub rmse: f64,
}

/// MAE of the medians and RMSE of the means over every (day, hour) pair.
pub fn point_scores<'a>(
    days: impl IntoIterator<Item = (&'a [DistSpec<f64>], &'a [f64])>,
) -> Result<PointScores> {
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for (forecast, actual) in days {
        if forecast.len() != actual.len() {
            return Err(EvalError::Shape(format!(
                "{} forecasts for {} prices",
                forecast.len(),
                actual.len()
            )));
        }
        for (f, &y) in forecast.iter().zip(actual) {
            abs += (f.median()? - y).abs();
            sq += (f.mean()? - y).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    Ok(PointScores {
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
    })
}

/// Central prediction interval `[Q((1-c)/2), Q((1+c)/2)]`.
pub fn central_interval(f: &DistSpec<f64>, coverage: f64) -> Result<(f64, f64)> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(EvalError::Coverage(coverage));
    }
    Ok((
        f.quantile((1.0 - coverage) / 2.0)?,
        f.quantile((1.0 + coverage) / 2.0)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KupiecResult {
    pub lr: f64,
    pub p_value: f64,
    pub pass: bool,
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Likelihood-ratio test of unconditional coverage; `hits` counts
/// observations inside the interval of nominal coverage `c`.
pub fn kupiec_test(hits: usize, n: usize, c: f64, alpha: f64) -> Result<KupiecResult> {
    if n == 0 || hits > n {
        return Err(EvalError::Counts { hits, n });
    }
    if !(c > 0.0 && c < 1.0) {
        return Err(EvalError::Coverage(c));
    }
    let (x, nf) = (hits as f64, n as f64);
    let miss = nf - x;
    let null = xlogy(miss, 1.0 - c) + xlogy(x, c);
    let alt = xlogy(miss, miss / nf) + xlogy(x, x / nf);
    let lr = (-2.0 * null + 2.0 * alt).max(0.0);
    let p_value = chi2_sf(lr, 1.0);
    Ok(KupiecResult {
        lr,
        p_value,
        pass: p_value >= alpha,
    })
}

/// One-sided p-values of the Diebold-Mariano test on daily loss norms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DmResult {
    pub statistic: f64,
    /// Small when A is significantly more accurate than B.
    pub p_a_better: f64,
    /// Small when B is significantly more accurate than A.
    pub p_b_better: f64,
}

/// `loss_a`, `loss_b`: n x 24 per-hour losses (CRPS) on the same days.
pub fn dm_test(loss_a: &Matrix<f64>, loss_b: &Matrix<f64>) -> Result<DmResult> {
    if loss_a.rows() != loss_b.rows() || loss_a.cols() != loss_b.cols() {
        return Err(EvalError::Shape("loss matrices differ in shape".into()));
    }
    let n = loss_a.rows();
    if n < DM_MIN_DAYS {
        return Err(EvalError::TooShort(n));
    }
    let delta: Vec<f64> = (0..n)
        .map(|d| loss_a.row(d).iter().sum::<f64>() - loss_b.row(d).iter().sum::<f64>())
        .collect();
    let mean = delta.iter().sum::<f64>() / n as f64;
    let var = delta.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1e-300)) || sd == 0.0 {
        return Err(EvalError::Degenerate);
    }
    let statistic = mean / (sd / (n as f64).sqrt());
    let p_a_better = norm_cdf(statistic);
    Ok(DmResult {
        statistic,
        p_a_better,
        p_b_better: norm_cdf(-statistic),
    })
}

/// Per-(day, hour) CRPS of a sequence of daily forecasts.
pub fn crps_matrix<'a>(
    days: impl IntoIterator<Item = (&'a [DistSpec<f64>], &'a [f64])>,
) -> Result<Matrix<f64>> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (forecast, actual) in days {
        if *cols.get_or_insert(actual.len()) != actual.len() || forecast.len() != actual.len() {
            return Err(EvalError::Shape("ragged forecast days".into()));
        }
        for (f, &y) in forecast.iter().zip(actual) {
            data.push(crps_approx(f, y)?);
        }
        rows += 1;
    }
    Ok(Matrix::from_vec(rows, cols.unwrap_or(0), data))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub model: String,
    pub days: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Probabilistic scores; `None` for point forecasts.
    pub crps: Option<f64>,
    pub coverage50: Option<f64>,
    pub coverage90: Option<f64>,
    /// Hours (of 24) passing the Kupiec test for the 50% interval.
    pub kupiec50: Option<usize>,
    pub kupiec90: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn opt6(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl ScoreTable {
    pub fn get(&self, model: &str) -> Option<&ScoreRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "model", "days", "MAE", "RMSE", "CRPS", "cov50", "cov90", "Kupiec50", "Kupiec90",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.days.to_string(),
                format!("{:.6}", r.mae),
                format!("{:.6}", r.rmse),
                opt6(r.crps),
                opt6(r.coverage50),
                opt6(r.coverage90),
                opt(r.kupiec50),
                opt(r.kupiec90),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Outcome of one ordered model pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DmCell {
    Diagonal,
    PValue(f64),
    /// Identical loss series or too few common days.
    Degenerate,
}

/// `cells[a][b]`: p-value for "row model a is more accurate than column model b".
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DmMatrix {
    pub models: Vec<String>,
    pub cells: Vec<Vec<DmCell>>,
}

impl DmMatrix {
    /// Builds the matrix from per-model n x 24 loss matrices on common days.
    pub fn from_losses(models: Vec<String>, losses: &[Matrix<f64>]) -> Self {
        let k = models.len();
        let mut cells = vec![vec![DmCell::Diagonal; k]; k];
        for a in 0..k {
            for b in a + 1..k {
                match dm_test(&losses[a], &losses[b]) {
                    Ok(r) => {
                        cells[a][b] = DmCell::PValue(r.p_a_better);
                        cells[b][a] = DmCell::PValue(r.p_b_better);
                    }
                    Err(_) => {
                        cells[a][b] = DmCell::Degenerate;
                        cells[b][a] = DmCell::Degenerate;
                    }
                }
            }
        }
        Self { models, cells }
    }

    pub fn p_value(&self, a: &str, b: &str) -> Option<DmCell> {
        let i = self.models.iter().position(|m| m == a)?;
        let j = self.models.iter().position(|m| m == b)?;
        Some(self.cells[i][j])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["model".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header)?;
        for (m, row) in self.models.iter().zip(&self.cells) {
            let mut rec = vec![m.clone()];
            rec.extend(row.iter().map(|c| match c {
                DmCell::Diagonal => String::new(),
                DmCell::PValue(p) => format!("{p:.6e}"),
                DmCell::Degenerate => "degenerate".into(),
            }));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Number of the `days` whose observation lies inside the central interval.
pub fn interval_hits<'a>(
    pairs: impl IntoIterator<Item = (&'a DistSpec<f64>, f64)>,
    coverage: f64,
) -> Result<(usize, usize)> {
    let (mut hits, mut n) = (0, 0);
    for (f, y) in pairs {
        let (lo, hi) = central_interval(f, coverage)?;
        if y >= lo && y <= hi {
            hits += 1;
        }
        n += 1;
    }
    Ok((hits, n))
}

/// Generic scalar helper used by property tests.
pub fn mean_pinball<T: Scalar>(pairs: &[(T, T)], q: T) -> T {
    let s: T = pairs.iter().map(|&(qh, y)| pinball(qh, y, q)).sum();
    s / lit::<T>(pairs.len().max(1) as f64)
}
