//! Hyperparameter search scored on rolling 28-day validation blocks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dmlp::{
    fit_window, window_days, HyperparamSet, HIDDEN_LAYERS, L1_RANGE, LR_RANGE, NEURON_RANGE,
};
use crate::evaluation::crps_approx;
use crate::market_data::{FeatureGroup, FeatureMask, MarketView};
use crate::neural::{Activation, HeadKind, HeadReg, HiddenReg, TrainConfig};

use super::config::VALIDATION_BLOCK;
use super::{derive_seed, io_err, HarnessError, Result};

/// Sampling ranges of the search; rates and the learning rate are log-uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub neurons: (usize, usize),
    pub l1: (f64, f64),
    pub learning_rate: (f64, f64),
    /// Chance that each optional element (group, dropout, penalty) is on.
    pub inclusion: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            neurons: NEURON_RANGE,
            l1: L1_RANGE,
            learning_rate: LR_RANGE,
            inclusion: 0.5,
        }
    }
}

fn open_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    loop {
        let v = rng.gen_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    open_uniform(rng, lo.ln(), hi.ln())
        .exp()
        .clamp(lo * (1.0 + 1e-12), hi * (1.0 - 1e-12))
}

impl SearchSpace {
    pub fn with_max_neurons(max: usize) -> Self {
        Self {
            neurons: (NEURON_RANGE.0, max.clamp(NEURON_RANGE.0, NEURON_RANGE.1)),
            ..Self::default()
        }
    }

    pub fn sample(&self, head: HeadKind, rng: &mut ChaCha8Rng) -> HyperparamSet {
        let p = self.inclusion;
        let mask = loop {
            let mut flags = [false; 14];
            for f in flags.iter_mut() {
                *f = rng.gen_bool(p);
            }
            let m = FeatureMask(flags);
            if m.validate().is_ok() {
                break m;
            }
        };
        let dropout = rng.gen_bool(p).then(|| open_uniform(rng, 0.0, 1.0));
        let rate = |rng: &mut ChaCha8Rng| rng.gen_bool(p).then(|| log_uniform(rng, self.l1));
        let neurons = std::array::from_fn(|_| rng.gen_range(self.neurons.0..=self.neurons.1));
        let activations =
            std::array::from_fn(|_| Activation::ALL[rng.gen_range(0..Activation::ALL.len())]);
        let hidden_l1: [HiddenReg<f64>; HIDDEN_LAYERS] = std::array::from_fn(|_| HiddenReg {
            activity: rate(rng),
            kernel: rate(rng),
        });
        let head_l1 = (0..head.params_per_output())
            .map(|_| HeadReg {
                kernel: rate(rng),
                bias: rate(rng),
            })
            .collect();
        HyperparamSet {
            feature_mask: mask,
            dropout,
            neurons,
            activations,
            hidden_l1,
            head_l1,
            learning_rate: log_uniform(rng, self.learning_rate),
        }
    }
}

/// JSON has no infinity: failed scores are written as `null`.
mod loss_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub params: HyperparamSet,
    /// Mean validation loss; infinite when a recalibration failed.
    #[serde(with = "loss_or_null")]
    pub score: f64,
    pub scored_days: Vec<usize>,
    pub error: Option<String>,
}

/// Proposes candidate sets; random search ignores the history.
pub trait SearchStrategy: Send {
    /// Next batch of at most `remaining` candidates.
    fn propose(&mut self, history: &[TrialRecord], remaining: usize) -> Vec<HyperparamSet>;
}

pub struct RandomSearch {
    space: SearchSpace,
    head: HeadKind,
    rng: ChaCha8Rng,
}

impl RandomSearch {
    pub fn new(space: SearchSpace, head: HeadKind, seed: u64) -> Self {
        Self {
            space,
            head,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl SearchStrategy for RandomSearch {
    fn propose(&mut self, _history: &[TrialRecord], remaining: usize) -> Vec<HyperparamSet> {
        (0..remaining)
            .map(|_| self.space.sample(self.head, &mut self.rng))
            .collect()
    }
}

/// Fixed inputs of one tuning run.
#[derive(Clone, Debug)]
pub struct TuningSetup {
    pub head: HeadKind,
    pub validation_start: usize,
    pub validation_days: usize,
    pub tuning_window: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

/// Scores one candidate: each 28-day block is forecast by a network trained
/// on the `tuning_window` days before it. Returns the mean loss (CRPS, or MAE
/// for a point head) and the scored days.
pub fn evaluate_trial(
    view: &(dyn MarketView + Sync),
    setup: &TuningSetup,
    h: &HyperparamSet,
    trial: usize,
) -> std::result::Result<(f64, Vec<usize>), String> {
    h.validate(setup.head).map_err(|e| e.to_string())?;
    let blocks = setup.validation_days / VALIDATION_BLOCK;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut days_seen = Vec::with_capacity(setup.validation_days);
    for b in 0..blocks {
        let start = setup.validation_start + b * VALIDATION_BLOCK;
        let train_days = window_days(start, setup.tuning_window).map_err(|e| e.to_string())?;
        let seed = derive_seed(setup.seed, "trial", &[trial as u64, b as u64]);
        let model = fit_window(view, &train_days, h, setup.head, &setup.train, seed)
            .map_err(|(e, _)| e.to_string())?;
        let days: Vec<usize> = (start..start + VALIDATION_BLOCK).collect();
        let forecasts = model
            .forecast_days(view, &days)
            .map_err(|e| e.to_string())?;
        for (&d, f) in days.iter().zip(&forecasts) {
            let prices = view.prices(d);
            for (dist, &y) in f.iter().zip(prices.iter()) {
                let loss = match setup.head {
                    HeadKind::Point => (dist.median().map_err(|e| e.to_string())? - y).abs(),
                    HeadKind::Distributional(_) => {
                        crps_approx(dist, y).map_err(|e| e.to_string())?
                    }
                };
                total += loss;
                count += 1;
            }
            days_seen.push(d);
        }
    }
    let score = total / count.max(1) as f64;
    if !score.is_finite() {
        return Err("non-finite validation loss".into());
    }
    Ok((score, days_seen))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningOutcome {
    pub model: String,
    pub run: usize,
    pub best: HyperparamSet,
    #[serde(with = "loss_or_null")]
    pub best_score: f64,
    pub trials: Vec<TrialRecord>,
}

/// Runs `trials` candidates from `strategy` and keeps the best-scoring set
/// (lowest index among ties). Failed trials score +inf.
pub fn tune_hyperparameters(
    view: &(dyn MarketView + Sync),
    setup: &TuningSetup,
    trials: usize,
    strategy: &mut dyn SearchStrategy,
    model: &str,
    run: usize,
) -> Result<TuningOutcome> {
    let mut history: Vec<TrialRecord> = Vec::with_capacity(trials);
    while history.len() < trials {
        let batch = strategy.propose(&history, trials - history.len());
        if batch.is_empty() {
            break;
        }
        let offset = history.len();
        let done: Vec<TrialRecord> = batch
            .into_par_iter()
            .enumerate()
            .map(|(i, params)| {
                let index = offset + i;
                match evaluate_trial(view, setup, &params, index) {
                    Ok((score, scored_days)) => TrialRecord {
                        index,
                        params,
                        score,
                        scored_days,
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("{model} run {run} trial {index} failed: {e}");
                        TrialRecord {
                            index,
                            params,
                            score: f64::INFINITY,
                            scored_days: Vec::new(),
                            error: Some(e),
                        }
                    }
                }
            })
            .collect();
        history.extend(done);
    }
    let best = history
        .iter()
        .filter(|t| t.score.is_finite())
        .min_by(|a, b| a.score.total_cmp(&b.score).then(a.index.cmp(&b.index)))
        .ok_or_else(|| HarnessError::TuningFailed {
            model: model.to_string(),
            run,
        })?;
    log::info!(
        "{model} run {run}: best trial {} scored {:.4}",
        best.index,
        best.score
    );
    Ok(TuningOutcome {
        model: model.to_string(),
        run,
        best: best.params.clone(),
        best_score: best.score,
        trials: history,
    })
}

/// Tuned sets of every (model, run), sorted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TunedSets {
    pub config_hash: String,
    pub outcomes: Vec<TuningOutcome>,
}

impl TunedSets {
    pub fn get(&self, model: &str, run: usize) -> Result<&HyperparamSet> {
        self.outcomes
            .iter()
            .find(|o| o.model == model && o.run == run)
            .map(|o| &o.best)
            .ok_or_else(|| HarnessError::MissingHyperparams {
                model: model.to_string(),
                run,
            })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("tuned sets serialize");
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Feature groups that a set uses, for reporting.
pub fn selected_groups(h: &HyperparamSet) -> Vec<FeatureGroup> {
    h.feature_mask.groups().collect()
}
