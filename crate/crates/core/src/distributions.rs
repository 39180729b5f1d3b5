//! Parametric predictive distributions (Normal, Johnson's SU) and the
//! non-parametric forms produced by benchmarks and ensembles.
//!
//! Johnson's SU uses the sinh-transform convention
//! `X = mu + sigma * sinh((Z - nu) / tau)` with `Z ~ N(0, 1)`, which gives
//! closed forms for the CDF and the quantile function.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensembling;
use crate::scalar::{lit, Scalar};
use crate::special::{norm_cdf, norm_pdf, norm_ppf, sigmoid, softplus};

/// Number of points on the percentile grid `0.01, 0.02, ..., 0.99`.
pub const N_PERCENTILES: usize = 99;

/// Additive floor placed on every positivity-linked parameter.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("probability {0} outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("non-finite argument {0}")]
    NonFinite(f64),
    #[error("operation `{op}` not defined for {family} distributions")]
    Unsupported {
        op: &'static str,
        family: &'static str,
    },
    #[error("invalid distribution: {0}")]
    Invalid(String),
    #[error("mixture quantile bracket not found after {0} expansions")]
    BracketFailure(usize),
}

pub type Result<T> = std::result::Result<T, DistError>;

/// The percentile grid `q = 0.01, ..., 0.99`.
pub fn percentile_grid<T: Scalar>() -> Vec<T> {
    (1..=N_PERCENTILES)
        .map(|i| T::from_usize_lossy(i) / lit(100.0))
        .collect()
}

/// Parametric families a distributional head can emit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Normal,
    Jsu,
}

impl Family {
    /// Number of distribution parameters (P).
    pub fn n_params(self) -> usize {
        match self {
            Family::Normal => 2,
            Family::Jsu => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Normal => "Normal",
            Family::Jsu => "JSU",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct NormalParams<T: Scalar> {
    pub mu: T,
    pub sigma: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct JsuParams<T: Scalar> {
    pub mu: T,
    pub sigma: T,
    pub nu: T,
    pub tau: T,
}

impl<T: Scalar> NormalParams<T> {
    pub fn new(mu: T, sigma: T) -> Self {
        Self { mu, sigma }
    }
}

impl<T: Scalar> JsuParams<T> {
    pub fn new(mu: T, sigma: T, nu: T, tau: T) -> Self {
        Self { mu, sigma, nu, tau }
    }

    /// Standardized argument `z = (x - mu) / sigma` and the implied normal
    /// score `r = nu + tau * asinh(z)`.
    #[inline]
    fn scores(&self, x: T) -> (T, T) {
        let z = (x - self.mu) / self.sigma;
        (z, self.nu + self.tau * z.asinh())
    }
}

/// A predictive distribution for one hourly price.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", bound = "")]
pub enum DistSpec<T: Scalar> {
    Normal {
        params: NormalParams<T>,
    },
    Jsu {
        params: JsuParams<T>,
    },
    /// Values of the 99 percentiles `q = 0.01..0.99`, non-decreasing.
    Empirical {
        quantiles: Vec<T>,
    },
    /// Equal-weight mixture.
    Mixture {
        members: Vec<DistSpec<T>>,
    },
    /// Degenerate distribution carrying a point forecast.
    Point {
        value: T,
    },
}

impl<T: Scalar> DistSpec<T> {
    pub fn normal(mu: T, sigma: T) -> Self {
        DistSpec::Normal {
            params: NormalParams::new(mu, sigma),
        }
    }

    pub fn jsu(mu: T, sigma: T, nu: T, tau: T) -> Self {
        DistSpec::Jsu {
            params: JsuParams::new(mu, sigma, nu, tau),
        }
    }

    /// Builds an empirical distribution, rejecting wrong lengths and crossings.
    pub fn empirical(quantiles: Vec<T>) -> Result<Self> {
        if quantiles.len() != N_PERCENTILES {
            return Err(DistError::Invalid(format!(
                "empirical distribution needs {N_PERCENTILES} quantiles, got {}",
                quantiles.len()
            )));
        }
        if quantiles.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(DistError::Invalid(
                "empirical quantiles must be non-decreasing".into(),
            ));
        }
        Ok(DistSpec::Empirical { quantiles })
    }

    pub fn mixture(members: Vec<DistSpec<T>>) -> Result<Self> {
        if members.is_empty() {
            return Err(DistError::Invalid(
                "mixture needs at least one member".into(),
            ));
        }
        Ok(DistSpec::Mixture { members })
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            DistSpec::Normal { .. } => "normal",
            DistSpec::Jsu { .. } => "jsu",
            DistSpec::Empirical { .. } => "empirical",
            DistSpec::Mixture { .. } => "mixture",
            DistSpec::Point { .. } => "point",
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, DistSpec::Normal { .. } | DistSpec::Jsu { .. })
    }

    /// Checks the structural invariants (positive scales, sorted quantiles, ...).
    pub fn validate(&self) -> Result<()> {
        match self {
            DistSpec::Normal { params } => {
                if !(params.sigma > T::zero()) || !params.mu.is_finite() {
                    return Err(DistError::Invalid(
                        "normal needs finite mu, sigma > 0".into(),
                    ));
                }
            }
            DistSpec::Jsu { params } => {
                if !(params.sigma > T::zero() && params.tau > T::zero())
                    || !params.mu.is_finite()
                    || !params.nu.is_finite()
                {
                    return Err(DistError::Invalid("jsu needs sigma > 0, tau > 0".into()));
                }
            }
            DistSpec::Empirical { quantiles } => {
                DistSpec::empirical(quantiles.clone())?;
            }
            DistSpec::Mixture { members } => {
                if members.is_empty() {
                    return Err(DistError::Invalid("empty mixture".into()));
                }
                members.iter().try_for_each(|m| m.validate())?;
            }
            DistSpec::Point { value } => {
                if !value.is_finite() {
                    return Err(DistError::NonFinite(value.to_f64_lossy()));
                }
            }
        }
        Ok(())
    }

    /// Log-density of a parametric distribution.
    pub fn logpdf(&self, x: T) -> Result<T> {
        if !x.is_finite() {
            return Err(DistError::NonFinite(x.to_f64_lossy()));
        }
        match self {
            DistSpec::Normal { params } => {
                let z = (x - params.mu) / params.sigma;
                Ok(-lit::<T>(0.5) * z * z - params.sigma.ln() - lit::<T>(0.5) * T::TAU().ln())
            }
            DistSpec::Jsu { params } => {
                let (z, r) = params.scores(x);
                Ok(params.tau.ln()
                    - params.sigma.ln()
                    - lit::<T>(0.5) * T::TAU().ln()
                    - lit::<T>(0.5) * (z * z).ln_1p()
                    - lit::<T>(0.5) * r * r)
            }
            other => Err(DistError::Unsupported {
                op: "logpdf",
                family: other.family_name(),
            }),
        }
    }

    /// Density; mixtures average their members.
    pub fn pdf(&self, x: T) -> Result<T> {
        match self {
            DistSpec::Mixture { members } => {
                let mut acc = T::zero();
                for m in members {
                    acc += m.pdf(x)?;
                }
                Ok(acc / T::from_usize_lossy(members.len()))
            }
            DistSpec::Jsu { params } if x.is_finite() => {
                let (z, r) = params.scores(x);
                Ok(params.tau / params.sigma * norm_pdf(r) / (T::one() + z * z).sqrt())
            }
            _ => Ok(self.logpdf(x)?.exp()),
        }
    }

    /// Cumulative distribution function.
    ///
    /// Empirical forecasts interpolate linearly between percentile knots and
    /// extrapolate flat, so values below the first knot map to 0.01 and values
    /// above the last knot to 0.99 (see [`DistSpec::cdf_with_flag`]).
    pub fn cdf(&self, x: T) -> T {
        self.cdf_with_flag(x).0
    }

    /// CDF together with a marker set when an empirical forecast was evaluated
    /// outside its percentile grid.
    pub fn cdf_with_flag(&self, x: T) -> (T, bool) {
        match self {
            DistSpec::Normal { params } => (norm_cdf((x - params.mu) / params.sigma), false),
            DistSpec::Jsu { params } => (norm_cdf(params.scores(x).1), false),
            DistSpec::Empirical { quantiles } => empirical_cdf(quantiles, x),
            DistSpec::Mixture { members } => {
                let mut acc = T::zero();
                let mut flag = false;
                for m in members {
                    let (p, f) = m.cdf_with_flag(x);
                    acc += p;
                    flag |= f;
                }
                (acc / T::from_usize_lossy(members.len()), flag)
            }
            DistSpec::Point { value } => {
                if x < *value {
                    (T::zero(), false)
                } else {
                    (T::one(), false)
                }
            }
        }
    }

    /// Quantile function for `0 < p < 1`.
    pub fn quantile(&self, p: T) -> Result<T> {
        if !(p > T::zero() && p < T::one()) {
            return Err(DistError::ProbabilityOutOfRange(p.to_f64_lossy()));
        }
        Ok(match self {
            DistSpec::Normal { params } => params.mu + params.sigma * norm_ppf(p),
            DistSpec::Jsu { params } => {
                params.mu + params.sigma * ((norm_ppf(p) - params.nu) / params.tau).sinh()
            }
            DistSpec::Empirical { quantiles } => empirical_quantile(quantiles, p),
            DistSpec::Mixture { members } => ensembling::mixture_quantile(members, p)?,
            DistSpec::Point { value } => *value,
        })
    }

    /// Values at the 99-point percentile grid.
    pub fn percentiles(&self) -> Result<Vec<T>> {
        if let DistSpec::Empirical { quantiles } = self {
            return Ok(quantiles.clone());
        }
        percentile_grid::<T>()
            .into_iter()
            .map(|q| self.quantile(q))
            .collect()
    }

    pub fn mean(&self) -> Result<T> {
        match self {
            DistSpec::Normal { params } => Ok(params.mu),
            DistSpec::Jsu { params } => Ok(params.mu
                - params.sigma
                    * (lit::<T>(0.5) / (params.tau * params.tau)).exp()
                    * (params.nu / params.tau).sinh()),
            DistSpec::Empirical { quantiles } => {
                Ok(quantiles.iter().copied().sum::<T>() / T::from_usize_lossy(quantiles.len()))
            }
            DistSpec::Mixture { members } => {
                let mut acc = T::zero();
                for m in members {
                    acc += m.mean()?;
                }
                Ok(acc / T::from_usize_lossy(members.len()))
            }
            DistSpec::Point { value } => Ok(*value),
        }
    }

    pub fn median(&self) -> Result<T> {
        match self {
            DistSpec::Normal { params } => Ok(params.mu),
            DistSpec::Jsu { params } => {
                Ok(params.mu + params.sigma * (-params.nu / params.tau).sinh())
            }
            DistSpec::Empirical { quantiles } => Ok(quantiles[N_PERCENTILES / 2]),
            DistSpec::Mixture { .. } => self.quantile(lit(0.5)),
            DistSpec::Point { value } => Ok(*value),
        }
    }

    /// Variance of a parametric distribution.
    pub fn variance(&self) -> Result<T> {
        match self {
            DistSpec::Normal { params } => Ok(params.sigma * params.sigma),
            DistSpec::Jsu { params } => {
                let w = (T::one() / (params.tau * params.tau)).exp();
                let two: T = lit(2.0);
                Ok(params.sigma * params.sigma / two
                    * (w - T::one())
                    * (w * (two * params.nu / params.tau).cosh() + T::one()))
            }
            other => Err(DistError::Unsupported {
                op: "variance",
                family: other.family_name(),
            }),
        }
    }

    /// Gradient of `logpdf(x)` with respect to the raw head outputs that
    /// produced this distribution through [`link`].
    ///
    /// Order: `(mu, s_raw)` for Normal, `(mu, s_raw, nu, t_raw)` for JSU.
    pub fn logpdf_grad_raw(&self, raw: &[T], x: T) -> Result<Vec<T>> {
        match self {
            DistSpec::Normal { params } => {
                let dsigma = sigmoid(raw[1]);
                let z = (x - params.mu) / params.sigma;
                let d_mu = z / params.sigma;
                let d_sigma = (z * z - T::one()) / params.sigma;
                Ok(vec![d_mu, d_sigma * dsigma])
            }
            DistSpec::Jsu { params } => {
                let dsigma = sigmoid(raw[1]);
                let dtau = sigmoid(raw[3]);
                let (z, r) = params.scores(x);
                let one_z2 = T::one() + z * z;
                // -d logpdf / dz
                let g = z / one_z2 + r * params.tau / one_z2.sqrt();
                let d_mu = g / params.sigma;
                let d_sigma = (g * z - T::one()) / params.sigma;
                let d_nu = -r;
                let d_tau = params.tau.recip() - r * z.asinh();
                Ok(vec![d_mu, d_sigma * dsigma, d_nu, d_tau * dtau])
            }
            other => Err(DistError::Unsupported {
                op: "logpdf_grad",
                family: other.family_name(),
            }),
        }
    }
}

/// Maps raw head outputs to distribution parameters: location and skewness
/// pass through, scale and tail-weight go through `softplus(.) + 1e-6`.
pub fn link<T: Scalar>(raw: &[T], family: Family) -> Result<DistSpec<T>> {
    if raw.len() != family.n_params() {
        return Err(DistError::Invalid(format!(
            "{} head expects {} raw values, got {}",
            family.name(),
            family.n_params(),
            raw.len()
        )));
    }
    if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
        return Err(DistError::NonFinite(bad.to_f64_lossy()));
    }
    Ok(link_unchecked(raw, family))
}

#[inline]
pub(crate) fn positive<T: Scalar>(raw: T) -> T {
    softplus(raw) + lit(SCALE_FLOOR)
}

#[inline]
pub(crate) fn link_unchecked<T: Scalar>(raw: &[T], family: Family) -> DistSpec<T> {
    match family {
        Family::Normal => DistSpec::normal(raw[0], positive(raw[1])),
        Family::Jsu => DistSpec::jsu(raw[0], positive(raw[1]), raw[2], positive(raw[3])),
    }
}

/// Gradient of `logpdf(link(raw), x)` with respect to `raw`.
pub fn logpdf_grad<T: Scalar>(raw: &[T], family: Family, x: T) -> Result<Vec<T>> {
    link(raw, family)?.logpdf_grad_raw(raw, x)
}

fn empirical_cdf<T: Scalar>(values: &[T], x: T) -> (T, bool) {
    let step: T = lit(0.01);
    let n = values.len();
    if x < values[0] {
        return (step, true);
    }
    if x >= values[n - 1] {
        return (T::from_usize_lossy(n) * step, x > values[n - 1]);
    }
    // last knot with value <= x
    let i = values.partition_point(|v| *v <= x) - 1;
    let lo = values[i];
    let hi = values[i + 1];
    let base = T::from_usize_lossy(i + 1) * step;
    if hi > lo {
        (base + (x - lo) / (hi - lo) * step, false)
    } else {
        (base, false)
    }
}

fn empirical_quantile<T: Scalar>(values: &[T], p: T) -> T {
    let n = values.len();
    let pos = p * lit(100.0) - T::one();
    if pos <= T::zero() {
        return values[0];
    }
    let last = T::from_usize_lossy(n - 1);
    if pos >= last {
        return values[n - 1];
    }
    let i = pos.floor().to_usize().unwrap_or(0).min(n - 2);
    let frac = pos - T::from_usize_lossy(i);
    values[i] + frac * (values[i + 1] - values[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

    fn jsu(mu: f64, sigma: f64, nu: f64, tau: f64) -> DistSpec<f64> {
        DistSpec::jsu(mu, sigma, nu, tau)
    }

    #[test]
    fn logpdf_modes() {
        let n = DistSpec::normal(0.0, 1.0);
        assert!((n.logpdf(0.0).unwrap() + LN_SQRT_2PI).abs() < 1e-15);
        let j = jsu(0.0, 1.0, 0.0, 1.0);
        assert!((j.logpdf(0.0).unwrap() + LN_SQRT_2PI).abs() < 1e-15);
        assert!(n.logpdf(f64::NAN).is_err());
        assert!(DistSpec::Point { value: 1.0 }.logpdf(1.0).is_err());
    }

    #[test]
    fn jsu_density_is_derivative_of_cdf() {
        let j = jsu(0.0, 1.0, 1.0, 2.0);
        let h = 1e-5;
        let fd = (j.cdf(1.0 + h) - j.cdf(1.0 - h)) / (2.0 * h);
        assert!((j.pdf(1.0).unwrap() - fd).abs() < 1e-6);
        assert!((j.logpdf(1.0).unwrap().exp() - fd).abs() < 1e-6);
    }

    #[test]
    fn cdf_fixed_points() {
        for tau in [0.3, 1.0, 7.0] {
            assert!((jsu(0.0, 1.0, 0.0, tau).cdf(0.0) - 0.5).abs() < 1e-15);
        }
        assert!((DistSpec::normal(3.0_f64, 2.0).cdf(3.0) - 0.5).abs() < 1e-15);
        assert!((jsu(0.0, 1.0, 1.0, 2.0).cdf((-0.5_f64).sinh()) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn quantile_closed_forms() {
        assert_eq!(DistSpec::normal(0.0, 1.0).quantile(0.5).unwrap(), 0.0);
        let q = jsu(0.0, 1.0, 1.0, 2.0).quantile(0.5).unwrap();
        assert!((q - (-0.521_095_305_493_747_4)).abs() < 1e-12);
        assert!(DistSpec::normal(0.0, 1.0).quantile(0.0).is_err());
        assert!(DistSpec::normal(0.0, 1.0).quantile(1.0).is_err());
    }

    #[test]
    fn mean_median_closed_forms() {
        let j = jsu(5.0, 2.0, 0.0, 1.0);
        assert_eq!(j.mean().unwrap(), 5.0);
        assert_eq!(j.median().unwrap(), 5.0);
        let n = DistSpec::normal(-3.0, 7.0);
        assert_eq!(n.mean().unwrap(), -3.0);
        assert_eq!(n.median().unwrap(), -3.0);
    }

    #[test]
    fn link_examples() {
        let s0 = link(&[0.0, 0.0], Family::Normal).unwrap();
        let DistSpec::Normal { params } = s0 else {
            unreachable!()
        };
        assert!((params.sigma - (std::f64::consts::LN_2 + 1e-6)).abs() < 1e-15);

        let DistSpec::Normal { params } = link(&[0.0_f64, -40.0], Family::Normal).unwrap() else {
            unreachable!()
        };
        assert!((params.sigma - 1e-6).abs() < 1e-15);

        // softplus(20) = 20 + 2e-9; the additive floor contributes the other 1e-6
        let DistSpec::Normal { params } = link(&[0.0_f64, 20.0], Family::Normal).unwrap() else {
            unreachable!()
        };
        assert!((params.sigma - 20.0).abs() < 1.1e-6);
        assert!((params.sigma - 1e-6 - 20.0).abs() < 1e-8);

        assert!(link(&[f64::INFINITY, 0.0], Family::Normal).is_err());
        assert!(link(&[0.0, 0.0, 0.0], Family::Jsu).is_err());
    }

    #[test]
    fn normal_grad_examples() {
        let g = logpdf_grad(&[2.0_f64, 0.3], Family::Normal, 2.0).unwrap();
        assert!(g[0].abs() < 1e-15);
        // sigma exactly 1 is not reachable through the link, so check (x - mu)/sigma^2
        let d = DistSpec::normal(0.0_f64, 1.0);
        let g = d.logpdf_grad_raw(&[0.0, 0.0], 1.0).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empirical_cdf_and_quantile() {
        let values: Vec<f64> = (1..=99).map(|i| i as f64).collect();
        let e = DistSpec::empirical(values).unwrap();
        assert!((e.cdf(50.0) - 0.5).abs() < 1e-15);
        assert!((e.cdf(50.5) - 0.505).abs() < 1e-15);
        assert_eq!(e.cdf_with_flag(-3.0), (0.01, true));
        assert_eq!(e.cdf_with_flag(200.0), (0.99, true));
        assert!((e.quantile(0.5).unwrap() - 50.0).abs() < 1e-12);
        assert!((e.quantile(0.505).unwrap() - 50.5).abs() < 1e-12);
        assert_eq!(e.quantile(0.001).unwrap(), 1.0);
        assert_eq!(e.median().unwrap(), 50.0);
        assert!((e.mean().unwrap() - 50.0).abs() < 1e-12);
        assert!(DistSpec::empirical(vec![1.0; 98]).is_err());
        let mut bad: Vec<f64> = (1..=99).map(|i| i as f64).collect();
        bad[10] = 0.0;
        assert!(DistSpec::empirical(bad).is_err());
    }

    #[test]
    fn json_shape() {
        let j = serde_json::to_value(jsu(1.0, 2.0, 3.0, 4.0)).unwrap();
        assert_eq!(j["family"], "jsu");
        assert_eq!(j["params"]["tau"], 4.0);
        let e = DistSpec::empirical(vec![0.5; 99]).unwrap();
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["quantiles"].as_array().unwrap().len(), 99);
        let back: DistSpec<f64> = serde_json::from_value(v).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn f32_distribution() {
        let d: DistSpec<f32> = DistSpec::jsu(0.0, 1.0, 1.0, 2.0);
        let q = d.quantile(0.3).unwrap();
        assert!((d.cdf(q) - 0.3).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn cdf_monotone(mu in -50.0..50.0f64, ls in -2.0..3.0f64, nu in -3.0..3.0f64,
                        lt in -1.5..1.5f64, a in -200.0..200.0f64, b in -200.0..200.0f64) {
            let d = jsu(mu, ls.exp(), nu, lt.exp());
            let (x1, x2) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(d.cdf(x1) <= d.cdf(x2));
            let n = DistSpec::normal(mu, ls.exp());
            prop_assert!(n.cdf(x1) <= n.cdf(x2));
        }

        #[test]
        fn grad_matches_finite_differences(raw in proptest::collection::vec(-2.0..2.0f64, 4),
                                            x in -4.0..4.0f64) {
            let h = 1e-5;
            for family in [Family::Normal, Family::Jsu] {
                let raw = &raw[..family.n_params()];
                let g = logpdf_grad(raw, family, x).unwrap();
                for k in 0..raw.len() {
                    let mut up = raw.to_vec();
                    let mut dn = raw.to_vec();
                    up[k] += h;
                    dn[k] -= h;
                    let fd = (link(&up, family).unwrap().logpdf(x).unwrap()
                        - link(&dn, family).unwrap().logpdf(x).unwrap()) / (2.0 * h);
                    let rel = (g[k] - fd).abs() / fd.abs().max(1.0);
                    prop_assert!(rel < 1e-6, "{:?} k={} analytic={} fd={}", family, k, g[k], fd);
                }
            }
        }
    }
}
