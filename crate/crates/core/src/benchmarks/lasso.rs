//! Lasso by cyclic coordinate descent on the centred Gram matrix.
//!
//! Minimizes `(1/2n) |y - X b - b0|^2 + lambda |b|_1` with an unpenalized
//! intercept. Working on `G = Xc'Xc / n` and `c = Xc'yc / n` lets several
//! targets (hours) and several cross-validation folds share one Gram matrix.

use crate::matrix::Matrix;
use crate::scalar::{lit, Scalar};

use super::{BenchError, Result};

pub const LASSO_TOL: f64 = 1e-7;
pub const MAX_SWEEPS: usize = 10_000;
pub const N_LAMBDAS: usize = 100;
pub const LAMBDA_FLOOR_RATIO: f64 = 1e-4;
/// Path stops once this fraction of the target variance is explained.
pub const PATH_MAX_R2: f64 = 0.999;
/// Path stops once consecutive fits differ by less than this in R^2.
pub const PATH_MIN_R2_GAIN: f64 = 1e-5;

/// Coordinate descent stopping rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stopping {
    /// Largest coefficient change in a sweep below the threshold.
    CoefChange(f64),
    /// Largest `G_jj * delta_j^2` below the threshold times the target
    /// variance, the usual rule for long regularization paths.
    Deviance(f64),
}

impl Default for Stopping {
    fn default() -> Self {
        Stopping::CoefChange(LASSO_TOL)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoFit<T: Scalar> {
    pub beta: Vec<T>,
    pub intercept: T,
    pub lambda: T,
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after every sweep.
    pub objective_trace: Vec<T>,
}

/// Centred second moments of one regression problem.
#[derive(Clone, Debug)]
pub struct LassoProblem<T: Scalar> {
    pub n: usize,
    pub gram: Matrix<T>,
    pub xty: Vec<T>,
    pub yty: T,
    pub x_mean: Vec<T>,
    pub y_mean: T,
}

#[inline]
fn soft_threshold<T: Scalar>(z: T, lambda: T) -> T {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        T::zero()
    }
}

/// Raw (uncentred) sums of a data block; blocks can be added and subtracted.
#[derive(Clone, Debug)]
pub struct Moments<T: Scalar> {
    pub n: usize,
    pub sum_x: Vec<T>,
    pub sxx: Matrix<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn of_rows(x: &Matrix<T>, rows: impl Iterator<Item = usize>) -> Self {
        let p = x.cols();
        let mut m = Self {
            n: 0,
            sum_x: vec![T::zero(); p],
            sxx: Matrix::zeros(p, p),
        };
        for i in rows {
            let r = x.row(i);
            m.n += 1;
            for (s, &v) in m.sum_x.iter_mut().zip(r) {
                *s += v;
            }
            for (a, &va) in r.iter().enumerate() {
                if va == T::zero() {
                    continue;
                }
                let out = m.sxx.row_mut(a);
                // upper triangle only, mirrored in `centred_gram`
                for (o, &vb) in out[a..].iter_mut().zip(&r[a..]) {
                    *o += va * vb;
                }
            }
        }
        m
    }

    pub fn minus(&self, other: &Self) -> Self {
        let mut sxx = self.sxx.clone();
        for (a, &b) in sxx.as_mut_slice().iter_mut().zip(other.sxx.as_slice()) {
            *a -= b;
        }
        Self {
            n: self.n - other.n,
            sum_x: self
                .sum_x
                .iter()
                .zip(&other.sum_x)
                .map(|(&a, &b)| a - b)
                .collect(),
            sxx,
        }
    }

    /// `Xc'Xc / n` from the raw sums.
    pub fn centred_gram(&self) -> (Matrix<T>, Vec<T>) {
        let p = self.sum_x.len();
        let n = T::from_usize_lossy(self.n);
        let mean: Vec<T> = self.sum_x.iter().map(|&s| s / n).collect();
        let mut g = Matrix::zeros(p, p);
        for a in 0..p {
            for b in a..p {
                let v = self.sxx[(a, b)] / n - mean[a] * mean[b];
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        (g, mean)
    }
}

impl<T: Scalar> LassoProblem<T> {
    pub fn new(x: &Matrix<T>, y: &[T]) -> Result<Self> {
        if x.rows() != y.len() || x.rows() < 2 {
            return Err(BenchError::Invalid(format!(
                "lasso needs >= 2 matching rows, got {} and {}",
                x.rows(),
                y.len()
            )));
        }
        let moments = Moments::of_rows(x, 0..x.rows());
        let (gram, x_mean) = moments.centred_gram();
        let rows: Vec<usize> = (0..x.rows()).collect();
        Ok(Self::with_gram(x, y, &rows, gram, x_mean))
    }

    /// Completes a problem whose Gram matrix over `rows` is already known.
    pub fn with_gram(
        x: &Matrix<T>,
        y: &[T],
        rows: &[usize],
        gram: Matrix<T>,
        x_mean: Vec<T>,
    ) -> Self {
        let n = T::from_usize_lossy(rows.len());
        let y_mean = rows.iter().map(|&i| y[i]).sum::<T>() / n;
        let mut xty = vec![T::zero(); x.cols()];
        let mut yty = T::zero();
        for &i in rows {
            let yc = y[i] - y_mean;
            yty += yc * yc;
            for (s, &v) in xty.iter_mut().zip(x.row(i)) {
                *s += v * yc;
            }
        }
        xty.iter_mut().for_each(|s| *s /= n);
        // centring x is implicit: sum_i (x_i - xbar) yc_i = sum_i x_i yc_i
        Self {
            n: rows.len(),
            gram,
            xty,
            yty: yty / n,
            x_mean,
            y_mean,
        }
    }

    /// Smallest penalty with an all-zero solution.
    pub fn lambda_max(&self) -> T {
        self.xty.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn intercept(&self, beta: &[T]) -> T {
        self.y_mean
            - beta
                .iter()
                .zip(&self.x_mean)
                .map(|(&b, &m)| b * m)
                .sum::<T>()
    }

    fn objective(&self, beta: &[T], g: &[T], lambda: T) -> T {
        // 1/2 yty - b'c + 1/2 b'Gb with Gb = c - g
        let half: T = lit(0.5);
        let mut fit = T::zero();
        let mut l1 = T::zero();
        for ((&b, &c), &gj) in beta.iter().zip(&self.xty).zip(g) {
            fit += b * (c + gj);
            l1 += b.abs();
        }
        half * self.yty - half * fit + lambda * l1
    }

    /// Mean squared centred residual `yty - 2 b'c + b'Gb` of `beta`.
    pub fn residual_variance(&self, beta: &[T]) -> T {
        let two: T = lit(2.0);
        let mut out = self.yty;
        for (j, &b) in beta.iter().enumerate() {
            if b == T::zero() {
                continue;
            }
            let gb: T = self
                .gram
                .row(j)
                .iter()
                .zip(beta)
                .map(|(&g, &bk)| g * bk)
                .sum();
            out += b * gb - two * b * self.xty[j];
        }
        out.max(T::zero())
    }

    /// Warm-started fits along a decreasing `grid`. The path ends early when
    /// the fit saturates; the returned vector is then shorter than `grid` and
    /// its last fit stands in for the remaining penalties.
    pub fn path(&self, grid: &[T], stop: Stopping) -> Vec<LassoFit<T>> {
        let mut beta = vec![T::zero(); self.xty.len()];
        let mut fits = Vec::with_capacity(grid.len());
        let mut prev_r2 = T::zero();
        for &lambda in grid {
            let fit = self.solve_with(lambda, &mut beta, stop);
            fits.push(fit);
            if self.yty <= T::zero() {
                break;
            }
            let r2 = T::one() - self.residual_variance(&beta) / self.yty;
            if fits.len() > 1 && (r2 >= lit(PATH_MAX_R2) || r2 - prev_r2 < lit(PATH_MIN_R2_GAIN)) {
                break;
            }
            prev_r2 = r2;
        }
        fits
    }

    /// Coordinate descent from `beta` (warm start, updated in place).
    pub fn solve(&self, lambda: T, beta: &mut [T]) -> LassoFit<T> {
        self.solve_with(lambda, beta, Stopping::default())
    }

    pub fn solve_with(&self, lambda: T, beta: &mut [T], stop: Stopping) -> LassoFit<T> {
        let p = self.xty.len();
        // `update` returns the change measured on the scale of `stop`
        let (tol, weighted): (T, bool) = match stop {
            Stopping::CoefChange(t) => (lit(t), false),
            Stopping::Deviance(t) => (lit::<T>(t) * self.yty, true),
        };
        let tiny: T = lit(1e-12);
        let mut g = self.xty.clone();
        for (j, &b) in beta.iter().enumerate() {
            if b != T::zero() {
                for (gk, &gkj) in g.iter_mut().zip(self.gram.row(j)) {
                    *gk -= gkj * b;
                }
            }
        }
        let mut trace = Vec::new();
        let mut sweeps = 0;
        let mut converged = false;
        let update = |j: usize, beta: &mut [T], g: &mut [T]| -> T {
            let gjj = self.gram[(j, j)];
            if gjj <= tiny {
                return T::zero();
            }
            let old = beta[j];
            let new = soft_threshold(g[j] + gjj * old, lambda) / gjj;
            let delta = new - old;
            if delta != T::zero() {
                beta[j] = new;
                for (gk, &gkj) in g.iter_mut().zip(self.gram.row(j)) {
                    *gk -= gkj * delta;
                }
            }
            if weighted {
                gjj * delta * delta
            } else {
                delta.abs()
            }
        };
        let mut active: Vec<usize> = Vec::with_capacity(p);
        'outer: while sweeps < MAX_SWEEPS {
            let mut max_delta = T::zero();
            for j in 0..p {
                max_delta = max_delta.max(update(j, beta, &mut g));
            }
            sweeps += 1;
            trace.push(self.objective(beta, &g, lambda));
            if max_delta < tol {
                converged = true;
                break;
            }
            active.clear();
            active.extend((0..p).filter(|&j| beta[j] != T::zero()));
            loop {
                if sweeps >= MAX_SWEEPS {
                    break 'outer;
                }
                let mut max_delta = T::zero();
                for &j in &active {
                    max_delta = max_delta.max(update(j, beta, &mut g));
                }
                sweeps += 1;
                trace.push(self.objective(beta, &g, lambda));
                if max_delta < tol {
                    break;
                }
            }
        }
        if !converged {
            log::warn!("lasso did not converge in {MAX_SWEEPS} sweeps at lambda {lambda}");
        }
        LassoFit {
            intercept: self.intercept(beta),
            beta: beta.to_vec(),
            lambda,
            sweeps,
            converged,
            objective_trace: trace,
        }
    }
}

/// Geometric grid from `lambda_max` down to `lambda_max * 1e-4`.
pub fn lambda_grid_from_max<T: Scalar>(lambda_max: T, n: usize) -> Vec<T> {
    if n == 1 {
        return vec![lambda_max];
    }
    let ratio: T = lit(LAMBDA_FLOOR_RATIO);
    let step = ratio.ln() / T::from_usize_lossy(n - 1);
    (0..n)
        .map(|i| lambda_max * (step * T::from_usize_lossy(i)).exp())
        .collect()
}

/// Decreasing penalty grid for standardized `x`.
pub fn lambda_grid<T: Scalar>(x: &Matrix<T>, y: &[T], n: usize) -> Result<Vec<T>> {
    let problem = LassoProblem::new(x, y)?;
    let lmax = problem.lambda_max();
    if problem.yty <= T::epsilon() * problem.y_mean.abs().max(T::one()) || lmax <= T::zero() {
        return Err(BenchError::DegenerateTarget);
    }
    Ok(lambda_grid_from_max(lmax, n))
}

/// Single lasso fit from a cold start.
pub fn lasso_fit<T: Scalar>(x: &Matrix<T>, y: &[T], lambda: T) -> Result<LassoFit<T>> {
    if !(lambda >= T::zero()) {
        return Err(BenchError::Invalid(format!("lambda {lambda} must be >= 0")));
    }
    let problem = LassoProblem::new(x, y)?;
    let mut beta = vec![T::zero(); x.cols()];
    Ok(problem.solve(lambda, &mut beta))
}

/// `(1/2n) |y - X b - b0|^2 + lambda |b|_1` evaluated directly.
pub fn lasso_objective<T: Scalar>(
    x: &Matrix<T>,
    y: &[T],
    beta: &[T],
    intercept: T,
    lambda: T,
) -> T {
    let mut rss = T::zero();
    for (i, &yi) in y.iter().enumerate() {
        let pred = intercept + x.row(i).iter().zip(beta).map(|(&a, &b)| a * b).sum::<T>();
        rss += (yi - pred) * (yi - pred);
    }
    rss / (lit::<T>(2.0) * T::from_usize_lossy(y.len()))
        + lambda * beta.iter().map(|b| b.abs()).sum::<T>()
}
