//! LEAR: per-hour lasso on the full regressor set with the penalty chosen by
//! contiguous-block cross validation.

use std::io::Write;

use crate::market_data::{
    assemble_features, feature_matrix, target_matrix, FeatureMask, MarketView, Scaler, HOURS,
    MIN_LAG_DAY,
};
use crate::matrix::Matrix;

use super::lasso::{lambda_grid_from_max, LassoProblem, Moments, Stopping, N_LAMBDAS};
use super::{BenchError, Result};

pub const DEFAULT_WINDOWS: [usize; 4] = [56, 84, 1092, 1456];
pub const CV_FOLDS: usize = 7;
/// Stopping rule along the cross-validation paths.
pub const CV_STOPPING: Stopping = Stopping::Deviance(1e-7);

/// Lasso model of one hour, in standardized regressor units.
#[derive(Clone, Debug, PartialEq)]
pub struct HourModel {
    pub lambda: f64,
    pub beta: Vec<f64>,
    pub intercept: f64,
    /// Target had zero variance; intercept-only model.
    pub degenerate: bool,
}

impl HourModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Contiguous fold boundaries over `n` rows.
pub fn fold_ranges(n: usize, folds: usize) -> Vec<std::ops::Range<usize>> {
    (0..folds)
        .map(|f| f * n / folds..(f + 1) * n / folds)
        .collect()
}

/// Cross-validated lasso for every column of `y` over standardized `x`.
pub fn cv_lasso(x: &Matrix<f64>, y: &Matrix<f64>, folds: usize) -> Result<Vec<HourModel>> {
    let n = x.rows();
    if n < 2 * folds {
        return Err(BenchError::TooFewObservations {
            needed: 2 * folds,
            got: n,
        });
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let full = Moments::of_rows(x, 0..n);
    let (full_gram, full_mean) = full.centred_gram();
    let ranges = fold_ranges(n, folds);
    let fold_grams: Vec<_> = ranges
        .iter()
        .map(|r| {
            let train = full.minus(&Moments::of_rows(x, r.clone()));
            let rows: Vec<usize> = (0..r.start).chain(r.end..n).collect();
            (train.centred_gram(), rows)
        })
        .collect();

    (0..y.cols())
        .map(|h| {
            let yh = y.column(h);
            let problem =
                LassoProblem::with_gram(x, &yh, &all_rows, full_gram.clone(), full_mean.clone());
            let lmax = problem.lambda_max();
            if problem.yty <= f64::EPSILON * problem.y_mean.abs().max(1.0) || lmax <= 0.0 {
                log::warn!("hour {h}: constant target, intercept-only model");
                return Ok(HourModel {
                    lambda: f64::INFINITY,
                    beta: vec![0.0; x.cols()],
                    intercept: problem.y_mean,
                    degenerate: true,
                });
            }
            let grid = lambda_grid_from_max(lmax, N_LAMBDAS);
            let mut sse = vec![0.0; grid.len()];
            for (((gram, mean), rows), range) in fold_grams.iter().zip(&ranges) {
                let fp = LassoProblem::with_gram(x, &yh, rows, gram.clone(), mean.clone());
                let fits = fp.path(&grid, CV_STOPPING);
                for (k, s) in sse.iter_mut().enumerate() {
                    let fit = &fits[k.min(fits.len() - 1)];
                    let active: Vec<usize> = (0..fit.beta.len())
                        .filter(|&j| fit.beta[j] != 0.0)
                        .collect();
                    for i in range.clone() {
                        let row = x.row(i);
                        let pred = fit.intercept
                            + active.iter().map(|&j| row[j] * fit.beta[j]).sum::<f64>();
                        *s += (yh[i] - pred) * (yh[i] - pred);
                    }
                }
            }
            // first minimum, i.e. the largest penalty among ties
            let best = (0..grid.len()).fold(0, |b, k| if sse[k] < sse[b] { k } else { b });
            let mut fits = problem.path(&grid[..=best], CV_STOPPING);
            let fit = fits.pop().expect("non-empty grid");
            Ok(HourModel {
                lambda: grid[best],
                beta: fit.beta,
                intercept: fit.intercept,
                degenerate: false,
            })
        })
        .collect()
}

/// LEAR fitted on one calibration window.
#[derive(Clone, Debug)]
pub struct LearFit {
    pub days: Vec<usize>,
    pub scaler: Scaler<f64>,
    pub hours: Vec<HourModel>,
    /// In-sample residuals, one row per calibration day.
    pub residuals: Matrix<f64>,
}

impl LearFit {
    pub fn fit(view: &dyn MarketView, days: &[usize]) -> Result<Self> {
        let mask = FeatureMask::all();
        let x = feature_matrix(view, days, &mask)?;
        let y = target_matrix(view, days);
        let scaler = Scaler::fit(&x)?;
        let xs = scaler.transform(&x);
        let hours = cv_lasso(&xs, &y, CV_FOLDS)?;
        let mut residuals = Matrix::zeros(days.len(), HOURS);
        for i in 0..days.len() {
            for (h, m) in hours.iter().enumerate() {
                residuals[(i, h)] = y[(i, h)] - m.predict(xs.row(i));
            }
        }
        Ok(Self {
            days: days.to_vec(),
            scaler,
            hours,
            residuals,
        })
    }

    pub fn predict(&self, view: &dyn MarketView, t: usize) -> Result<[f64; HOURS]> {
        let mut row = assemble_features(view, t, &FeatureMask::all())?.values;
        self.scaler.transform_row(&mut row);
        Ok(std::array::from_fn(|h| self.hours[h].predict(&row)))
    }

    /// Coefficients in standardized units, one row per hour.
    pub fn write_coefficients_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let p = self.hours.first().map_or(0, |m| m.beta.len());
        let mut header = vec!["hour".to_string(), "lambda".into(), "intercept".into()];
        header.extend((0..p).map(|j| format!("b{j}")));
        w.write_record(&header)?;
        for (h, m) in self.hours.iter().enumerate() {
            let mut rec = vec![h.to_string(), m.lambda.to_string(), m.intercept.to_string()];
            rec.extend(m.beta.iter().map(|b| b.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fits on days `t - window .. t - 1` and forecasts day `t`.
pub fn lear_forecast(
    view: &dyn MarketView,
    t: usize,
    window: usize,
) -> Result<([f64; HOURS], LearFit)> {
    if window < 2 * CV_FOLDS || t < window + MIN_LAG_DAY || t >= view.n_days() {
        return Err(BenchError::Window { t, window });
    }
    let days: Vec<usize> = (t - window..t).collect();
    let fit = LearFit::fit(view, &days)?;
    Ok((fit.predict(view, t)?, fit))
}

/// Hour-by-hour mean of several point forecasts.
pub fn ensemble_mean(forecasts: &[[f64; HOURS]]) -> [f64; HOURS] {
    let k = forecasts.len() as f64;
    std::array::from_fn(|h| forecasts.iter().map(|f| f[h]).sum::<f64>() / k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_rows() {
        let r = fold_ranges(400, 7);
        assert_eq!(r.len(), 7);
        assert_eq!(r[0].start, 0);
        assert_eq!(r[6].end, 400);
        assert!(r.windows(2).all(|w| w[0].end == w[1].start));
        assert_eq!(r.iter().map(|x| x.len()).sum::<usize>(), 400);
    }

    #[test]
    fn ensemble_is_hourly_mean() {
        let a = [1.0; HOURS];
        let b = std::array::from_fn(|h| h as f64);
        let m = ensemble_mean(&[a, b]);
        for h in 0..HOURS {
            assert_eq!(m[h], (1.0 + h as f64) / 2.0);
        }
    }
}
