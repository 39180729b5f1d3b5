//! Linear quantile regression.
//!
//! The dual linear program `max y'a  s.t.  X'a = (1 - q) X'1, 0 <= a <= 1`
//! is solved by a Frisch-Newton primal-dual interior point method with a
//! Mehrotra-type corrector. The interior solution is then snapped to the
//! basic solution interpolating the best-fitting observations whenever that
//! does not worsen the objective.

use crate::evaluation::pinball;
use crate::matrix::{is_positive_definite, solve_dense, solve_spd, Matrix};
use crate::scalar::{lit, Scalar};

use super::{BenchError, Result};

const STEP_DAMPING: f64 = 0.99995;
const STALL_ITERS: usize = 5;
const MAX_ITER: usize = 100;
const RIDGE_JITTER: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct QrFit<T: Scalar> {
    pub intercept: T,
    pub beta: Vec<T>,
    /// Design was rank deficient and the Newton systems were ridge-stabilized.
    pub jittered: bool,
    pub iterations: usize,
}

impl<T: Scalar> QrFit<T> {
    pub fn predict(&self, x: &[T]) -> T {
        self.intercept + x.iter().zip(&self.beta).map(|(&a, &b)| a * b).sum::<T>()
    }
}

/// Total pinball loss of a linear quantile model.
pub fn pinball_objective<T: Scalar>(x: &Matrix<T>, y: &[T], intercept: T, beta: &[T], q: T) -> T {
    y.iter()
        .enumerate()
        .map(|(i, &yi)| {
            let pred = intercept + x.row(i).iter().zip(beta).map(|(&a, &b)| a * b).sum::<T>();
            pinball(pred, yi, q)
        })
        .sum()
}

fn bound<T: Scalar>(v: &[T], dv: &[T]) -> T {
    let mut b = lit::<T>(1e20);
    for (&x, &d) in v.iter().zip(dv) {
        if d < T::zero() {
            b = b.min(-x / d);
        }
    }
    b
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `A diag(q) A'` with `A = D'` stored as the n x p design `d`.
fn weighted_gram<T: Scalar>(d: &Matrix<T>, q: &[T], jitter: T) -> Matrix<T> {
    let p = d.cols();
    let mut g = Matrix::zeros(p, p);
    for (i, &w) in q.iter().enumerate() {
        let r = d.row(i);
        for a in 0..p {
            let wa = w * r[a];
            for b in a..p {
                g[(a, b)] += wa * r[b];
            }
        }
    }
    for a in 0..p {
        g[(a, a)] += jitter;
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

/// `D' v`
fn at_mul<T: Scalar>(d: &Matrix<T>, v: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); d.cols()];
    for (i, &vi) in v.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(d.row(i)) {
            *o += x * vi;
        }
    }
    out
}

/// `D v`
fn a_t_mul<T: Scalar>(d: &Matrix<T>, v: &[T]) -> Vec<T> {
    (0..d.rows()).map(|i| dot(d.row(i), v)).collect()
}

fn solve<T: Scalar>(g: &Matrix<T>, rhs: &[T]) -> Result<Vec<T>> {
    solve_spd(g, rhs).ok_or_else(|| {
        BenchError::Numerical("singular Newton system in quantile regression".into())
    })
}

/// Interior point solve on the design `d` (intercept column included);
/// returns the coefficients and the iteration count.
fn frisch_newton<T: Scalar>(d: &Matrix<T>, y: &[T], q: T, jitter: T) -> Result<(Vec<T>, usize)> {
    let n = d.rows();
    let one = T::one();
    let beta_d: T = lit(STEP_DAMPING);
    let c: Vec<T> = y.iter().map(|&v| -v).collect();
    let ones = vec![one; n];
    let b: Vec<T> = at_mul(d, &ones)
        .into_iter()
        .map(|v| v * (one - q))
        .collect();
    let mut x = vec![one - q; n];
    let mut s: Vec<T> = x.iter().map(|&v| one - v).collect();

    let mut yd = solve(&weighted_gram(d, &ones, jitter), &at_mul(d, &c))?;
    let fitted = a_t_mul(d, &yd);
    let mut r: Vec<T> = c.iter().zip(&fitted).map(|(&ci, &fi)| ci - fi).collect();
    let nudge: T = lit(1e-3);
    for v in r.iter_mut() {
        if v.abs() < T::epsilon() {
            *v += nudge;
        }
    }
    let mut z: Vec<T> = r.iter().map(|&v| v.max(T::zero())).collect();
    let mut w: Vec<T> = z.iter().zip(&r).map(|(&zi, &ri)| zi - ri).collect();
    let gap = |x: &[T], yd: &[T], w: &[T]| dot(&c, x) - dot(&b, yd) + w.iter().copied().sum::<T>();
    let tol = lit::<T>(1e-10) * T::from_usize_lossy(n);
    let mut it = 0;
    let (mut best_gap, mut stalled) = (T::infinity(), 0);
    loop {
        let g = gap(&x, &yd, &w);
        if g <= tol || it >= MAX_ITER {
            break;
        }
        // the jittered problem cannot always close the gap; stop once it stalls
        if g < best_gap * lit(0.999) {
            best_gap = g;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= STALL_ITERS {
                break;
            }
        }
        let qv: Vec<T> = (0..n).map(|i| one / (z[i] / x[i] + w[i] / s[i])).collect();
        if qv.iter().any(|v| !v.is_finite() || *v == T::zero()) {
            break;
        }
        it += 1;
        let r: Vec<T> = z.iter().zip(&w).map(|(&a, &b)| a - b).collect();
        let gram = weighted_gram(d, &qv, jitter);
        let qr: Vec<T> = qv.iter().zip(&r).map(|(&a, &b)| a * b).collect();
        let mut rhs = at_mul(d, &qr);
        let mut dy = solve(&gram, &rhs)?;
        let ady = a_t_mul(d, &dy);
        let mut dx: Vec<T> = (0..n).map(|i| qv[i] * (ady[i] - r[i])).collect();
        let mut ds: Vec<T> = dx.iter().map(|&v| -v).collect();
        let mut dz: Vec<T> = (0..n).map(|i| -z[i] * (dx[i] / x[i] + one)).collect();
        let mut dw: Vec<T> = (0..n).map(|i| -w[i] * (ds[i] / s[i] + one)).collect();
        let steps = |dx: &[T], ds: &[T], dz: &[T], dw: &[T], x: &[T], s: &[T], z: &[T], w: &[T]| {
            let fp = (beta_d * bound(x, dx).min(bound(s, ds))).min(one);
            let fd = (beta_d * bound(w, dw).min(bound(z, dz))).min(one);
            (fp, fd)
        };
        let (mut fp, mut fd) = steps(&dx, &ds, &dz, &dw, &x, &s, &z, &w);
        if fp.min(fd) < one {
            let mu0 = dot(&z, &x) + dot(&w, &s);
            let g: T = (0..n)
                .map(|i| {
                    (z[i] + fd * dz[i]) * (x[i] + fp * dx[i])
                        + (w[i] + fd * dw[i]) * (s[i] + fp * ds[i])
                })
                .sum();
            let mu = mu0 * (g / mu0).powi(3) / (lit::<T>(2.0) * T::from_usize_lossy(n));
            let dxdz: Vec<T> = (0..n).map(|i| dx[i] * dz[i]).collect();
            let dsdw: Vec<T> = (0..n).map(|i| ds[i] * dw[i]).collect();
            let xi: Vec<T> = (0..n).map(|i| mu * (one / x[i] - one / s[i])).collect();
            let corr: Vec<T> = (0..n)
                .map(|i| qv[i] * (dxdz[i] - dsdw[i] - xi[i]))
                .collect();
            for (a, b) in rhs.iter_mut().zip(at_mul(d, &corr)) {
                *a += b;
            }
            dy = solve(&gram, &rhs)?;
            let ady = a_t_mul(d, &dy);
            dx = (0..n)
                .map(|i| qv[i] * (ady[i] + xi[i] - r[i] - dxdz[i] + dsdw[i]))
                .collect();
            ds = dx.iter().map(|&v| -v).collect();
            dz = (0..n)
                .map(|i| mu / x[i] - z[i] - z[i] * dx[i] / x[i] - dxdz[i])
                .collect();
            dw = (0..n)
                .map(|i| mu / s[i] - w[i] - w[i] * ds[i] / s[i] - dsdw[i])
                .collect();
            (fp, fd) = steps(&dx, &ds, &dz, &dw, &x, &s, &z, &w);
        }
        for i in 0..n {
            x[i] += fp * dx[i];
            s[i] += fp * ds[i];
            w[i] += fd * dw[i];
            z[i] += fd * dz[i];
        }
        for (a, b) in yd.iter_mut().zip(&dy) {
            *a += fd * *b;
        }
        if x.iter()
            .chain(&s)
            .chain(&z)
            .chain(&w)
            .any(|v| !v.is_finite())
        {
            return Err(BenchError::Numerical(
                "interior point iterate became non-finite".into(),
            ));
        }
    }
    Ok((yd.into_iter().map(|v| -v).collect(), it))
}

fn design_objective<T: Scalar>(d: &Matrix<T>, y: &[T], coef: &[T], q: T) -> T {
    y.iter()
        .enumerate()
        .map(|(i, &yi)| pinball(dot(d.row(i), coef), yi, q))
        .sum()
}

/// Replaces `coef` by the basic solution through the `p` observations with
/// the smallest residuals when that is at least as good.
fn polish<T: Scalar>(d: &Matrix<T>, y: &[T], coef: &mut Vec<T>, q: T) {
    let p = d.cols();
    let mut idx: Vec<usize> = (0..d.rows()).collect();
    let resid: Vec<T> = (0..d.rows())
        .map(|i| (y[i] - dot(d.row(i), coef)).abs())
        .collect();
    idx.sort_by(|&a, &b| {
        resid[a]
            .partial_cmp(&resid[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let sub = d.select_rows(&idx[..p]);
    let rhs: Vec<T> = idx[..p].iter().map(|&i| y[i]).collect();
    if let Some(candidate) = solve_dense(&sub, &rhs) {
        if candidate.iter().all(|v| v.is_finite())
            && design_objective(d, y, &candidate, q) <= design_objective(d, y, coef, q)
        {
            *coef = candidate;
        }
    }
}

/// Minimizes the total pinball loss of `intercept + x beta` at level `q`.
pub fn quantile_regression_fit<T: Scalar>(x: &Matrix<T>, y: &[T], q: T) -> Result<QrFit<T>> {
    if !(q > T::zero() && q < T::one()) {
        return Err(BenchError::QuantileLevel(q.to_f64_lossy()));
    }
    let (n, k) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(BenchError::Invalid(format!(
            "{} targets for {n} rows",
            y.len()
        )));
    }
    if n <= k + 1 {
        return Err(BenchError::TooFewObservations {
            needed: k + 1,
            got: n,
        });
    }
    if x.as_slice().iter().chain(y).any(|v| !v.is_finite()) {
        return Err(BenchError::Invalid("non-finite data".into()));
    }
    let nf = T::from_usize_lossy(n);
    // standardize regressors and target so tolerances are scale free
    let mut mean = vec![T::zero(); k];
    let mut sd = vec![T::zero(); k];
    for j in 0..k {
        let col = x.column(j);
        mean[j] = col.iter().copied().sum::<T>() / nf;
        sd[j] = (col
            .iter()
            .map(|&v| (v - mean[j]) * (v - mean[j]))
            .sum::<T>()
            / nf)
            .sqrt();
    }
    let y_mean = y.iter().copied().sum::<T>() / nf;
    let y_sd = (y.iter().map(|&v| (v - y_mean) * (v - y_mean)).sum::<T>() / nf).sqrt();
    let tiny: T = lit(1e-12);
    if y_sd <= tiny * y_mean.abs().max(T::one()) {
        return Ok(QrFit {
            intercept: y_mean,
            beta: vec![T::zero(); k],
            jittered: false,
            iterations: 0,
        });
    }
    let mut d = Matrix::zeros(n, k + 1);
    for i in 0..n {
        d[(i, 0)] = T::one();
        for j in 0..k {
            d[(i, j + 1)] = if sd[j] > tiny {
                (x[(i, j)] - mean[j]) / sd[j]
            } else {
                T::zero()
            };
        }
    }
    let ys: Vec<T> = y.iter().map(|&v| (v - y_mean) / y_sd).collect();

    let rank_ok = is_positive_definite(
        &weighted_gram(&d, &vec![T::one() / nf; n], T::zero()),
        lit(1e-10),
    );
    let jitter = if rank_ok {
        T::zero()
    } else {
        lit::<T>(RIDGE_JITTER)
    };
    if !rank_ok {
        log::debug!("rank deficient quantile regression design, ridge jitter {RIDGE_JITTER}");
    }
    let (mut coef, iterations) = frisch_newton(&d, &ys, q, jitter * nf)?;
    if rank_ok {
        polish(&d, &ys, &mut coef, q);
    }

    let mut intercept = y_mean + y_sd * coef[0];
    let mut beta = vec![T::zero(); k];
    for j in 0..k {
        if sd[j] > tiny {
            beta[j] = y_sd * coef[j + 1] / sd[j];
            intercept -= beta[j] * mean[j];
        }
    }
    Ok(QrFit {
        intercept,
        beta,
        jittered: !rank_ok,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn intercept_only_hits_order_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [11usize, 40, 181] {
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..30.0)).collect();
            let x = Matrix::zeros(n, 0);
            let mut sorted = y.clone();
            sorted.sort_by(f64::total_cmp);
            for q in [0.1, 0.5, 0.9] {
                let fit = quantile_regression_fit(&x, &y, q).unwrap();
                // any point of [y_(ceil(nq)), y_(floor(nq)+1)] is optimal
                let lo = sorted[((n as f64 * q).ceil() as usize).max(1) - 1];
                let hi = sorted[((n as f64 * q).floor() as usize).min(n - 1)];
                assert!(
                    fit.intercept >= lo - 1e-9 && fit.intercept <= hi + 1e-9,
                    "n={n} q={q}"
                );
            }
        }
    }

    #[test]
    fn collinear_design_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..10.0)).collect();
        let y: Vec<f64> = z
            .iter()
            .map(|v| 2.0 * v + rng.gen_range(-1.0..1.0))
            .collect();
        let x2 = Matrix::from_vec(60, 2, z.iter().flat_map(|&v| [v, v]).collect());
        let x1 = Matrix::from_vec(60, 1, z.clone());
        let a = quantile_regression_fit(&x2, &y, 0.3).unwrap();
        let b = quantile_regression_fit(&x1, &y, 0.3).unwrap();
        assert!(a.jittered && !b.jittered);
        for &v in &[0.0, 5.0, 10.0] {
            assert!((a.predict(&[v, v]) - b.predict(&[v])).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        assert!(quantile_regression_fit(&x, &[1.0, 2.0, 3.0], 1.0).is_err());
        assert!(matches!(
            quantile_regression_fit(&Matrix::from_vec(2, 1, vec![1.0, 2.0]), &[1.0, 2.0], 0.5),
            Err(BenchError::TooFewObservations { .. })
        ));
    }
}
