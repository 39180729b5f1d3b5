//! Residual bootstrap around a point forecast.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distributions::{percentile_grid, DistSpec};
use crate::matrix::Matrix;

use super::{BenchError, Result};

pub const MIN_BOOTSTRAP: usize = 100;
pub const DEFAULT_BOOTSTRAP: usize = 1000;

/// Linear-interpolation sample quantile (type 7) of sorted data.
pub fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// The 99 percentiles of `samples` (sorted in place).
pub fn empirical_percentiles(samples: &mut [f64]) -> Vec<f64> {
    samples.sort_by(f64::total_cmp);
    percentile_grid::<f64>()
        .into_iter()
        .map(|p| sorted_quantile(samples, p))
        .collect()
}

/// Adds `m` whole-day residual vectors, drawn with replacement from the rows
/// of `residuals`, to `point` and returns the hourly empirical percentiles.
pub fn bootstrap_distributions(
    point: &[f64],
    residuals: &Matrix<f64>,
    m: usize,
    seed: u64,
) -> Result<Vec<DistSpec<f64>>> {
    if m < MIN_BOOTSTRAP {
        return Err(BenchError::TooFewSamples {
            min: MIN_BOOTSTRAP,
            got: m,
        });
    }
    if residuals.rows() == 0 || residuals.cols() != point.len() {
        return Err(BenchError::Invalid(format!(
            "residual matrix {}x{} does not match {} hours",
            residuals.rows(),
            residuals.cols(),
            point.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<usize> = (0..m).map(|_| rng.gen_range(0..residuals.rows())).collect();
    let mut samples = vec![0.0; m];
    point
        .iter()
        .enumerate()
        .map(|(h, &f)| {
            for (s, &d) in samples.iter_mut().zip(&draws) {
                *s = f + residuals[(d, h)];
            }
            Ok(DistSpec::empirical(empirical_percentiles(&mut samples))?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::norm_ppf;

    #[test]
    fn zero_residuals_collapse_to_point() {
        let point: Vec<f64> = (0..24).map(|h| h as f64).collect();
        let res = Matrix::zeros(30, 24);
        let out = bootstrap_distributions(&point, &res, 200, 1).unwrap();
        for (h, d) in out.iter().enumerate() {
            let DistSpec::Empirical { quantiles } = d else {
                panic!()
            };
            assert!(quantiles.iter().all(|&q| q == h as f64));
        }
    }

    #[test]
    fn symmetric_residuals_centre_on_point() {
        // 200 residual days in +-pairs, spread like c * N(0, 1) quantiles
        let c = 3.0;
        let mut data = Vec::new();
        for i in 0..100 {
            let r = c * norm_ppf((i as f64 + 0.5) / 200.0);
            data.extend([r, r, -r, -r]);
        }
        let res = Matrix::from_vec(200, 2, data);
        let out = bootstrap_distributions(&[10.0, -5.0], &res, 100_000, 9).unwrap();
        // sd of the sample median proportion is 1/(2 sqrt(M)) ~ 0.0016, i.e.
        // well under one support step (~0.0125 c) near the centre
        for (d, f) in out.iter().zip([10.0, -5.0]) {
            assert!((d.median().unwrap() - f).abs() < 0.05 * c);
        }
    }

    #[test]
    fn determinism_and_validation() {
        let res = Matrix::from_vec(3, 1, vec![-1.0, 0.5, 2.0]);
        let a = bootstrap_distributions(&[1.0], &res, 500, 4).unwrap();
        let b = bootstrap_distributions(&[1.0], &res, 500, 4).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            bootstrap_distributions(&[1.0], &res, 99, 4),
            Err(BenchError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn type7_quantiles() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        let q = empirical_percentiles(&mut v);
        assert_eq!(q[49], 2.5);
        assert!((q[0] - 1.03).abs() < 1e-12);
    }
}
