//! Aggregation of several predictive distributions into one.
//!
//! Probability averaging ("pEns") forms the equal-weight mixture of the
//! members; quantile averaging ("qEns") averages the members' quantile
//! functions at each level of the grid.

use serde::{Deserialize, Serialize};

use crate::distributions::{percentile_grid, DistError, DistSpec, Result};
use crate::scalar::{lit, Scalar};

const MAX_BRACKET_EXPANSIONS: usize = 200;
const BISECTION_TOL: f64 = 1e-10;

/// Statistic used to combine member quantiles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantileStat {
    #[default]
    Mean,
    Median,
}

/// Horizontal aggregation on the 99-point percentile grid.
pub fn quantile_average<T: Scalar>(
    members: &[DistSpec<T>],
    stat: QuantileStat,
) -> Result<DistSpec<T>> {
    if members.is_empty() {
        return Err(DistError::Invalid(
            "quantile averaging needs members".into(),
        ));
    }
    let per_member: Vec<Vec<T>> = members
        .iter()
        .map(|m| m.percentiles())
        .collect::<Result<_>>()?;
    let grid = percentile_grid::<T>();
    let mut out = Vec::with_capacity(grid.len());
    let mut column = vec![T::zero(); members.len()];
    for i in 0..grid.len() {
        for (slot, member) in column.iter_mut().zip(&per_member) {
            *slot = member[i];
        }
        out.push(combine(&mut column, stat));
    }
    // averaging non-decreasing sequences keeps them non-decreasing; the median
    // of sorted columns does too, but rounding can produce ulp-level inversions
    for i in 1..out.len() {
        if out[i] < out[i - 1] {
            out[i] = out[i - 1];
        }
    }
    DistSpec::empirical(out)
}

fn combine<T: Scalar>(values: &mut [T], stat: QuantileStat) -> T {
    match stat {
        QuantileStat::Mean => values.iter().copied().sum::<T>() / T::from_usize_lossy(values.len()),
        QuantileStat::Median => {
            values.sort_by(|a, b| a.partial_cmp(b).expect("finite quantiles"));
            let n = values.len();
            if n % 2 == 1 {
                values[n / 2]
            } else {
                (values[n / 2 - 1] + values[n / 2]) * lit(0.5)
            }
        }
    }
}

/// Vertical aggregation: the equal-weight mixture of `members`.
pub fn probability_average<T: Scalar>(members: &[DistSpec<T>]) -> Result<DistSpec<T>> {
    if members.is_empty() {
        return Err(DistError::Invalid(
            "probability averaging needs members".into(),
        ));
    }
    DistSpec::mixture(members.to_vec())
}

/// Quantile of the equal-weight mixture of `members` by bisection on the
/// averaged CDF.
pub fn mixture_quantile<T: Scalar>(members: &[DistSpec<T>], p: T) -> Result<T> {
    if !(p > T::zero() && p < T::one()) {
        return Err(DistError::ProbabilityOutOfRange(p.to_f64_lossy()));
    }
    if members.is_empty() {
        return Err(DistError::Invalid("empty mixture".into()));
    }
    let n = T::from_usize_lossy(members.len());
    let cdf = |x: T| members.iter().map(|m| m.cdf(x)).sum::<T>() / n;

    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for m in members {
        let q = m.quantile(p)?;
        lo = lo.min(q);
        hi = hi.max(q);
    }
    let mut width = (hi - lo).max(T::one());
    let mut expansions = 0;
    while cdf(lo) > p {
        lo -= width;
        width *= lit(2.0);
        expansions += 1;
        if expansions > MAX_BRACKET_EXPANSIONS || !lo.is_finite() {
            return Err(DistError::BracketFailure(expansions));
        }
    }
    while cdf(hi) < p {
        hi += width;
        width *= lit(2.0);
        expansions += 1;
        if expansions > MAX_BRACKET_EXPANSIONS || !hi.is_finite() {
            return Err(DistError::BracketFailure(expansions));
        }
    }
    let tol: T = lit(BISECTION_TOL);
    let mut mid = (lo + hi) * lit(0.5);
    for _ in 0..400 {
        mid = (lo + hi) * lit(0.5);
        let f = cdf(mid);
        if (f - p).abs() < tol {
            break;
        }
        if f < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < tol * (T::one() + mid.abs()) {
            mid = (lo + hi) * lit(0.5);
            break;
        }
    }
    Ok(mid)
}
