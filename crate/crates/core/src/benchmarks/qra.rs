//! Quantile regression averaging over point forecasts.
//!
//! QRA regresses the price of one hour on `k` separate point forecasts,
//! QRM on their mean (`k = 1`); both over a trailing calibration window.

use crate::distributions::{percentile_grid, DistSpec};
use crate::matrix::Matrix;

use super::quantile_reg::quantile_regression_fit;
use super::{BenchError, Result};

pub const QR_WINDOW: usize = 182;

#[derive(Clone, Debug, PartialEq)]
pub struct QraForecast {
    pub dist: DistSpec<f64>,
    /// Some quantile fit needed the rank-deficiency fallback.
    pub jittered: bool,
    /// Predicted quantiles were reordered.
    pub rearranged: bool,
}

/// Percentile forecast for one hour from `point_history` (n x k), the
/// realized prices `y_history` and today's `k` point forecasts.
pub fn qra_forecast(
    point_history: &Matrix<f64>,
    y_history: &[f64],
    points_today: &[f64],
) -> Result<QraForecast> {
    if point_history.cols() != points_today.len() || point_history.rows() != y_history.len() {
        return Err(BenchError::Invalid(format!(
            "history {}x{}, {} targets, {} regressors today",
            point_history.rows(),
            point_history.cols(),
            y_history.len(),
            points_today.len()
        )));
    }
    let mut jittered = false;
    let mut quantiles = Vec::with_capacity(99);
    for q in percentile_grid::<f64>() {
        let fit = quantile_regression_fit(point_history, y_history, q)?;
        jittered |= fit.jittered;
        quantiles.push(fit.predict(points_today));
    }
    let rearranged = quantiles.windows(2).any(|w| w[1] < w[0]);
    quantiles.sort_by(f64::total_cmp);
    Ok(QraForecast {
        dist: DistSpec::empirical(quantiles)?,
        jittered,
        rearranged,
    })
}

/// Mean of the `k` columns, the single QRM regressor.
pub fn committee_column(point_history: &Matrix<f64>) -> Matrix<f64> {
    let k = point_history.cols() as f64;
    let data = (0..point_history.rows())
        .map(|i| point_history.row(i).iter().sum::<f64>() / k)
        .collect();
    Matrix::from_vec(point_history.rows(), 1, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_inputs_collapse_quantiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<f64> = (0..QR_WINDOW).map(|_| rng.gen_range(20.0..80.0)).collect();
        let x = Matrix::from_vec(QR_WINDOW, 1, y.clone());
        let f = qra_forecast(&x, &y, &[42.0]).unwrap();
        let DistSpec::Empirical { quantiles } = &f.dist else {
            panic!()
        };
        assert!(quantiles.iter().all(|&q| (q - 42.0).abs() < 1e-6));
    }

    #[test]
    fn identical_inputs_match_committee() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base: Vec<f64> = (0..QR_WINDOW).map(|_| rng.gen_range(20.0..80.0)).collect();
        let y: Vec<f64> = base.iter().map(|b| b + rng.gen_range(-5.0..8.0)).collect();
        let x4 = Matrix::from_vec(QR_WINDOW, 4, base.iter().flat_map(|&b| [b; 4]).collect());
        let qra = qra_forecast(&x4, &y, &[50.0; 4]).unwrap();
        let qrm = qra_forecast(&committee_column(&x4), &y, &[50.0]).unwrap();
        assert!(qra.jittered);
        let (DistSpec::Empirical { quantiles: a }, DistSpec::Empirical { quantiles: b }) =
            (&qra.dist, &qrm.dist)
        else {
            panic!()
        };
        for (u, v) in a.iter().zip(b) {
            assert!((u - v).abs() < 1e-4, "{u} vs {v}");
        }
    }
}
