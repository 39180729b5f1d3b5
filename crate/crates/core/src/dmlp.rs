//! Distributional and point multilayer perceptrons for the 24 hourly prices
//! of the next day.
//!
//! Inputs are z-scored on the training window. Targets are z-scored per hour
//! as well; since Normal and JSU are location-scale families the fitted
//! distribution maps back exactly (`mu -> m + s mu`, `sigma -> s sigma`).

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{link, DistError, DistSpec, Family};
use crate::market_data::{
    assemble_features, feature_matrix, target_matrix, DataError, FeatureMask, MarketView, Scaler,
    HOURS, MIN_LAG_DAY,
};
use crate::matrix::Matrix;
use crate::neural::{
    head_loss_row, init_network, train, Activation, HeadKind, HeadReg, HiddenReg, History, Loss,
    NetError, NetSpec, Network, RegConfig, TrainConfig, TrainError,
};
use crate::scalar::Scalar;

pub const HIDDEN_LAYERS: usize = 2;
pub const NEURON_RANGE: (usize, usize) = (16, 1024);
/// Open interval for L1 rates.
pub const L1_RANGE: (f64, f64) = (1e-5, 10.0);
/// Open interval for the learning rate.
pub const LR_RANGE: (f64, f64) = (1e-5, 1e-1);

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("day {t} needs a {window}-day window plus {MIN_LAG_DAY} lag days")]
    Window { t: usize, window: usize },
    #[error("training diverged for day {day} (run {run}) at epoch {epoch}")]
    Diverged {
        day: usize,
        run: usize,
        epoch: usize,
        history: History,
    },
}

pub type Result<T> = std::result::Result<T, ForecastError>;

/// Tunable configuration of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperparamSet {
    pub feature_mask: FeatureMask,
    /// Dropout rate after the input layer, `None` when disabled.
    pub dropout: Option<f64>,
    pub neurons: [usize; HIDDEN_LAYERS],
    pub activations: [Activation; HIDDEN_LAYERS],
    pub hidden_l1: [HiddenReg<f64>; HIDDEN_LAYERS],
    /// One entry per distribution parameter (one for a point head).
    pub head_l1: Vec<HeadReg<f64>>,
    pub learning_rate: f64,
}

fn in_open(v: f64, (lo, hi): (f64, f64)) -> bool {
    v > lo && v < hi
}

impl HyperparamSet {
    /// Unregularized set with every feature group, mostly for tests.
    pub fn plain(
        head: HeadKind,
        neurons: usize,
        activation: Activation,
        learning_rate: f64,
    ) -> Self {
        Self {
            feature_mask: FeatureMask::all(),
            dropout: None,
            neurons: [neurons; HIDDEN_LAYERS],
            activations: [activation; HIDDEN_LAYERS],
            hidden_l1: [HiddenReg::default(); HIDDEN_LAYERS],
            head_l1: vec![HeadReg::default(); head.params_per_output()],
            learning_rate,
        }
    }

    pub fn validate(&self, head: HeadKind) -> Result<()> {
        let bad = |msg: String| Err(ForecastError::Hyper(msg));
        self.feature_mask.validate()?;
        if let Some(r) = self.dropout {
            if !in_open(r, (0.0, 1.0)) {
                return bad(format!("dropout rate {r} outside (0, 1)"));
            }
        }
        for &n in &self.neurons {
            if n < NEURON_RANGE.0 || n > NEURON_RANGE.1 {
                return bad(format!(
                    "layer width {n} outside [{}, {}]",
                    NEURON_RANGE.0, NEURON_RANGE.1
                ));
            }
        }
        let rates = self
            .hidden_l1
            .iter()
            .flat_map(|r| [r.activity, r.kernel])
            .chain(self.head_l1.iter().flat_map(|r| [r.kernel, r.bias]))
            .flatten();
        for r in rates {
            if !in_open(r, L1_RANGE) {
                return bad(format!("L1 rate {r} outside {L1_RANGE:?}"));
            }
        }
        if self.head_l1.len() != head.params_per_output() {
            return bad(format!(
                "{} head penalties for a head with {} parameters",
                self.head_l1.len(),
                head.params_per_output()
            ));
        }
        if !in_open(self.learning_rate, LR_RANGE) {
            return bad(format!(
                "learning rate {} outside {LR_RANGE:?}",
                self.learning_rate
            ));
        }
        Ok(())
    }
}

/// Two hidden layers and a head of width 24 (point) or 24 * P.
pub fn build_network<T: Scalar>(
    h: &HyperparamSet,
    head: HeadKind,
    seed: u64,
) -> Result<Network<T>> {
    h.validate(head)?;
    let cast_hidden = |r: &HiddenReg<f64>| HiddenReg {
        activity: r.activity.map(T::lit),
        kernel: r.kernel.map(T::lit),
    };
    let cast_head = |r: &HeadReg<f64>| HeadReg {
        kernel: r.kernel.map(T::lit),
        bias: r.bias.map(T::lit),
    };
    let spec = NetSpec {
        input_dim: h.feature_mask.feature_len(),
        hidden: h.neurons.iter().copied().zip(h.activations).collect(),
        head,
        outputs: HOURS,
        dropout: T::lit(h.dropout.unwrap_or(0.0)),
        reg: RegConfig {
            hidden: h.hidden_l1.iter().map(cast_hidden).collect(),
            head: h.head_l1.iter().map(cast_head).collect(),
        },
    };
    Ok(init_network(spec, seed)?)
}

/// Mean negative log-likelihood over the `S` targets of one day and its
/// gradient with respect to the raw head outputs.
pub fn nll_loss<T: Scalar>(raw: &[T], y: &[T], family: Family) -> Result<(T, Vec<T>)> {
    let p = family.n_params();
    if raw.len() != y.len() * p {
        return Err(ForecastError::Hyper(format!(
            "expected {} raw outputs, got {}",
            y.len() * p,
            raw.len()
        )));
    }
    let mut grad = vec![T::zero(); raw.len()];
    let total = head_loss_row(Loss::Nll(family), raw, y, Some(&mut grad))
        .ok_or(NetError::NonFinite { epoch: 0, batch: 0 })?;
    let s = T::from_usize_lossy(y.len());
    grad.iter_mut().for_each(|g| *g /= s);
    Ok((total / s, grad))
}

/// The 24 hourly predictive distributions for one day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayForecast {
    pub day: NaiveDate,
    pub model: String,
    pub run: usize,
    pub hours: Vec<DistSpec<f64>>,
}

/// A network trained on one window together with its standardization.
#[derive(Clone, Debug)]
pub struct FittedModel {
    pub head: HeadKind,
    pub mask: FeatureMask,
    pub x_scaler: Scaler<f64>,
    pub y_scaler: Scaler<f64>,
    pub network: Network<f64>,
    pub history: History,
}

/// Trains a fresh network on `days` (feature rows and next-day targets).
/// `cfg.learning_rate` is replaced by the hyperparameter set's rate and
/// `cfg.seed` by `seed`.
pub fn fit_window(
    view: &dyn MarketView,
    days: &[usize],
    h: &HyperparamSet,
    head: HeadKind,
    cfg: &TrainConfig,
    seed: u64,
) -> std::result::Result<FittedModel, (ForecastError, Option<usize>)> {
    let prep = || -> Result<_> {
        let x = feature_matrix(view, days, &h.feature_mask)?;
        let y = target_matrix(view, days);
        let x_scaler = Scaler::fit(&x)?;
        let y_scaler = Scaler::fit(&y)?;
        let net = build_network::<f64>(h, head, seed)?;
        Ok((
            x_scaler.transform(&x),
            y_scaler.transform(&y),
            x_scaler,
            y_scaler,
            net,
        ))
    };
    let (xs, ys, x_scaler, y_scaler, net) = prep().map_err(|e| (e, None))?;
    let loss = match head {
        HeadKind::Point => Loss::Mae,
        HeadKind::Distributional(f) => Loss::Nll(f),
    };
    // network seed and shuffle seed are decorrelated
    let cfg = TrainConfig {
        learning_rate: h.learning_rate,
        seed: seed ^ 0x9e37_79b9_7f4a_7c15,
        ..cfg.clone()
    };
    match train(net, &xs, &ys, &cfg, loss) {
        Ok((network, history)) => Ok(FittedModel {
            head,
            mask: h.feature_mask,
            x_scaler,
            y_scaler,
            network,
            history,
        }),
        Err(TrainError::Diverged { epoch, history, .. }) => Err((
            ForecastError::Diverged {
                day: 0,
                run: 0,
                epoch,
                history,
            },
            Some(epoch),
        )),
        Err(TrainError::Net(e)) => Err((e.into(), None)),
    }
}

impl FittedModel {
    /// Forecasts for each of `days`; features are read up to each target day
    /// under the usual information set.
    pub fn forecast_days(
        &self,
        view: &dyn MarketView,
        days: &[usize],
    ) -> Result<Vec<Vec<DistSpec<f64>>>> {
        let mut x = feature_matrix(view, days, &self.mask)?;
        for i in 0..x.rows() {
            self.x_scaler.transform_row(x.row_mut(i));
        }
        let raw = self.network.predict(&x)?;
        (0..raw.rows()).map(|i| self.map_back(raw.row(i))).collect()
    }

    fn map_back(&self, raw: &[f64]) -> Result<Vec<DistSpec<f64>>> {
        let (m, s) = (&self.y_scaler.mean, &self.y_scaler.std);
        match self.head {
            HeadKind::Point => Ok((0..HOURS)
                .map(|h| DistSpec::Point {
                    value: m[h] + s[h] * raw[h],
                })
                .collect()),
            HeadKind::Distributional(family) => {
                let p = family.n_params();
                (0..HOURS)
                    .map(|h| {
                        let d = link(&raw[h * p..(h + 1) * p], family)?;
                        Ok(rescale(d, m[h], s[h]))
                    })
                    .collect()
            }
        }
    }
}

/// Location-scale transform `X -> m + s X` of a parametric distribution.
fn rescale(d: DistSpec<f64>, m: f64, s: f64) -> DistSpec<f64> {
    match d {
        DistSpec::Normal { params } => DistSpec::normal(m + s * params.mu, s * params.sigma),
        DistSpec::Jsu { params } => {
            DistSpec::jsu(m + s * params.mu, s * params.sigma, params.nu, params.tau)
        }
        other => other,
    }
}

/// Indices of the `window` days preceding `t`.
pub fn window_days(t: usize, window: usize) -> Result<Vec<usize>> {
    if window < 2 || t < window + MIN_LAG_DAY {
        return Err(ForecastError::Window { t, window });
    }
    Ok((t - window..t).collect())
}

/// Retrains a fresh network on days `t - window .. t - 1` and forecasts day `t`.
#[allow(clippy::too_many_arguments)]
pub fn recalibrate_and_forecast(
    view: &dyn MarketView,
    t: usize,
    h: &HyperparamSet,
    head: HeadKind,
    window: usize,
    cfg: &TrainConfig,
    seed: u64,
    run: usize,
) -> Result<(Vec<DistSpec<f64>>, History)> {
    let days = window_days(t, window)?;
    let model = fit_window(view, &days, h, head, cfg, seed).map_err(|(e, _)| match e {
        ForecastError::Diverged { epoch, history, .. } => ForecastError::Diverged {
            day: t,
            run,
            epoch,
            history,
        },
        e => e,
    })?;
    // only the feature row of day t is needed
    let mut row = assemble_features(view, t, &h.feature_mask)?.values;
    model.x_scaler.transform_row(&mut row);
    let raw = model
        .network
        .predict(&Matrix::from_vec(1, row.len(), row))?;
    Ok((model.map_back(raw.row(0))?, model.history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::FeatureGroup;
    use crate::special::softplus;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Raw value whose linked scale is exactly `target`.
    fn raw_for_scale(target: f64) -> f64 {
        let t = target - 1e-6;
        if t > 40.0 {
            t
        } else {
            t.exp_m1().ln()
        }
    }

    #[test]
    fn head_widths() {
        let mk = |head: HeadKind| {
            let h = HyperparamSet::plain(head, 16, Activation::Relu, 1e-3);
            build_network::<f64>(&h, head, 0).unwrap()
        };
        assert_eq!(mk(HeadKind::Distributional(Family::Jsu)).head_width(), 96);
        assert_eq!(
            mk(HeadKind::Distributional(Family::Normal)).head_width(),
            48
        );
        let point = mk(HeadKind::Point);
        assert_eq!(point.head_width(), 24);
        assert_eq!(point.input_dim, 227);
    }

    #[test]
    fn head_slices_follow_interleaved_layout() {
        let head = HeadKind::Distributional(Family::Jsu);
        let mut h = HyperparamSet::plain(head, 16, Activation::Tanh, 1e-3);
        h.feature_mask = FeatureMask::only(&[FeatureGroup::DayOfWeek]);
        let net = build_network::<f64>(&h, head, 3).unwrap();
        for p in 0..4 {
            let slice = net.head_kernel_slice(p);
            for r in 0..16 {
                for hour in 0..HOURS {
                    // independent column arithmetic
                    let col = 4 * hour + p;
                    assert_eq!(slice[(r, hour)], net.head.weights.as_slice()[r * 96 + col]);
                }
            }
        }
    }

    #[test]
    fn validation_rejects_out_of_range() {
        let head = HeadKind::Point;
        let mut h = HyperparamSet::plain(head, 16, Activation::Relu, 1e-3);
        assert!(h.validate(head).is_ok());
        h.neurons[0] = 8;
        assert!(h.validate(head).is_err());
        h.neurons[0] = 16;
        h.learning_rate = 0.5;
        assert!(h.validate(head).is_err());
        h.learning_rate = 1e-3;
        h.hidden_l1[1].kernel = Some(20.0);
        assert!(h.validate(head).is_err());
        h.hidden_l1[1].kernel = Some(1.0);
        assert!(h.validate(HeadKind::Distributional(Family::Jsu)).is_err());
    }

    #[test]
    fn nll_zero_residual_unit_scale() {
        let y = [3.0, -1.0, 7.5];
        let s = raw_for_scale(1.0);
        assert!((softplus(s) + 1e-6 - 1.0).abs() < 1e-15);
        let raw: Vec<f64> = y.iter().flat_map(|&v| [v, s]).collect();
        let (loss, _) = nll_loss(&raw, &y, Family::Normal).unwrap();
        assert!((loss - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn jsu_reduces_to_normal() {
        // sinh((Z - 0) / 1) is not Gaussian, so nu = 0, tau = 1 agrees with the
        // Normal only where the residual vanishes
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mu: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let unit = raw_for_scale(1.0);
        let normal: Vec<f64> = (0..24).flat_map(|h| [mu[h], s[h]]).collect();
        let jsu: Vec<f64> = (0..24).flat_map(|h| [mu[h], s[h], 0.0, unit]).collect();
        let (a, _) = nll_loss(&normal, &mu, Family::Normal).unwrap();
        let (b, _) = nll_loss(&jsu, &mu, Family::Jsu).unwrap();
        assert!((a - b).abs() < 1e-10);

        // away from the centre the reduction needs a large tail weight with
        // sigma scaled by tau
        let y: Vec<f64> = (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let tau = 1e4;
        let (a, _) = nll_loss(&normal, &y, Family::Normal).unwrap();
        let jsu: Vec<f64> = (0..24)
            .flat_map(|h| {
                let sigma = softplus(s[h]) + 1e-6;
                [mu[h], raw_for_scale(sigma * tau), 0.0, raw_for_scale(tau)]
            })
            .collect();
        let (b, _) = nll_loss(&jsu, &y, Family::Jsu).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for family in [Family::Normal, Family::Jsu] {
            let p = family.n_params();
            for _ in 0..20 {
                let y: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let raw: Vec<f64> = (0..4 * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let (_, g) = nll_loss(&raw, &y, family).unwrap();
                for i in 0..raw.len() {
                    let step = 1e-6;
                    let mut up = raw.clone();
                    up[i] += step;
                    let mut dn = raw.clone();
                    dn[i] -= step;
                    let fd = (nll_loss(&up, &y, family).unwrap().0
                        - nll_loss(&dn, &y, family).unwrap().0)
                        / (2.0 * step);
                    assert!(
                        (g[i] - fd).abs() <= 1e-6 * fd.abs().max(1e-3),
                        "{family:?} {i}: {} vs {fd}",
                        g[i]
                    );
                }
            }
        }
    }

    #[test]
    fn rescale_is_location_scale() {
        let d = DistSpec::jsu(0.5, 2.0, -0.3, 1.2);
        let r = rescale(d.clone(), 10.0, 3.0);
        for &p in &[0.05, 0.5, 0.9] {
            let q = r.quantile(p).unwrap();
            assert!((q - (10.0 + 3.0 * d.quantile(p).unwrap())).abs() < 1e-12);
        }
    }
}
