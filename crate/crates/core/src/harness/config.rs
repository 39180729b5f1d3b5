//! Study configuration (TOML) and the resolved day-index timeline.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmarks::bootstrap::MIN_BOOTSTRAP;
use crate::benchmarks::qra::QR_WINDOW;
use crate::distributions::Family;
use crate::dmlp::NEURON_RANGE;
use crate::market_data::{
    generate_synthetic, load_hourly_csv, MarketDataset, SyntheticConfig, MIN_LAG_DAY,
};
use crate::neural::{HeadKind, TrainConfig};

use super::{io_err, HarnessError, Result};

/// Length of one validation block of the tuning scheme.
pub const VALIDATION_BLOCK: usize = 28;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic(SyntheticConfig),
}

impl DataSource {
    pub fn load(&self) -> Result<MarketDataset> {
        Ok(match self {
            DataSource::Csv(path) => load_hourly_csv(path)?,
            DataSource::Synthetic(cfg) => generate_synthetic(cfg)?.dataset,
        })
    }
}

/// Hyperparameter search strategy of the tuning stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchKind {
    #[default]
    Random,
    /// Tree-structured Parzen estimator.
    Tpe,
}

/// A day given either as a row index or as a calendar date.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DayRef {
    Index(usize),
    Date(NaiveDate),
}

impl DayRef {
    pub fn resolve(self, ds: &MarketDataset) -> Result<usize> {
        match self {
            DayRef::Index(i) if i < ds.n_days() => Ok(i),
            DayRef::Index(i) => Err(HarnessError::Config(format!(
                "day index {i} beyond {} days",
                ds.n_days()
            ))),
            DayRef::Date(d) => ds
                .index_of(d)
                .ok_or_else(|| HarnessError::Config(format!("date {d} not in the data"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Naive,
    Lear,
    NnPoint,
    ProbNormal,
    ProbJsu,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Naive,
        ModelKind::Lear,
        ModelKind::NnPoint,
        ModelKind::ProbNormal,
        ModelKind::ProbJsu,
    ];

    /// Store name of the per-run model (or of the single model).
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Naive => "naive",
            ModelKind::Lear => "LEAR",
            ModelKind::NnPoint => "NN-Point",
            ModelKind::ProbNormal => "probNN-Normal",
            ModelKind::ProbJsu => "probNN-JSU",
        }
    }

    /// Network head for the tuned neural models.
    pub fn head(self) -> Option<HeadKind> {
        match self {
            ModelKind::NnPoint => Some(HeadKind::Point),
            ModelKind::ProbNormal => Some(HeadKind::Distributional(Family::Normal)),
            ModelKind::ProbJsu => Some(HeadKind::Distributional(Family::Jsu)),
            _ => None,
        }
    }
}

fn default_validation_days() -> usize {
    364
}
fn default_tuning_window() -> usize {
    1092
}
fn default_window() -> usize {
    1456
}
fn default_lear_windows() -> Vec<usize> {
    vec![56, 84, 1092, 1456]
}
fn default_qr_window() -> usize {
    QR_WINDOW
}
fn default_runs() -> usize {
    4
}
fn default_trials() -> usize {
    2048
}
fn default_roster() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}
fn default_one() -> usize {
    1
}
fn default_max_neurons() -> usize {
    NEURON_RANGE.1
}
fn default_bootstrap() -> usize {
    1000
}
fn default_output() -> PathBuf {
    PathBuf::from("study_output")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub data: DataSource,
    /// First out-of-sample day; the QR calibration warm-up starts here.
    pub test_start: DayRef,
    /// Last out-of-sample day (inclusive).
    pub test_end: DayRef,
    /// Tuning validation block immediately before `test_start`.
    #[serde(default = "default_validation_days")]
    pub validation_days: usize,
    /// Training window of each tuning recalibration.
    #[serde(default = "default_tuning_window")]
    pub tuning_window: usize,
    /// Rolling training window of the neural models and the naive residuals.
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_lear_windows")]
    pub lear_windows: Vec<usize>,
    #[serde(default = "default_qr_window")]
    pub qr_window: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_roster")]
    pub roster: Vec<ModelKind>,
    /// Days between model re-estimations; 1 retrains every day.
    #[serde(default = "default_one")]
    pub recalibration_interval: usize,
    #[serde(default = "default_max_neurons")]
    pub max_neurons: usize,
    #[serde(default)]
    pub search: SearchKind,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_samples: usize,
    #[serde(default)]
    pub train: TrainConfig,
    /// Worker threads; `None` uses every core.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

/// Day indices of a study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timeline {
    pub validation_start: usize,
    pub test_start: usize,
    /// First scored day, after the QR warm-up.
    pub eval_start: usize,
    /// One past the last out-of-sample day.
    pub test_end: usize,
}

impl Timeline {
    pub fn test_days(&self) -> std::ops::Range<usize> {
        self.test_start..self.test_end
    }

    pub fn eval_days(&self) -> std::ops::Range<usize> {
        self.eval_start..self.test_end
    }
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads a TOML config; a relative CSV path is taken relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (DataSource::Csv(p), Some(dir)) = (&mut cfg.data, path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn has(&self, kind: ModelKind) -> bool {
        self.roster.contains(&kind)
    }

    pub fn neural_models(&self) -> Vec<ModelKind> {
        ModelKind::ALL
            .into_iter()
            .filter(|k| k.head().is_some() && self.has(*k))
            .collect()
    }

    /// SHA-256 of the settings that determine the study outputs; thread
    /// count and output location are excluded.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.threads = None;
        canon.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canon).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }

    /// Checks the settings against the data and resolves the day indices.
    pub fn timeline(&self, ds: &MarketDataset) -> Result<Timeline> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let test_start = self.test_start.resolve(ds)?;
        let test_end = self.test_end.resolve(ds)? + 1;
        if test_start >= test_end {
            return bad("test_start must precede test_end".into());
        }
        if self.runs == 0 || self.trials == 0 || self.recalibration_interval == 0 {
            return bad("runs, trials and recalibration_interval must be >= 1".into());
        }
        if self.bootstrap_samples < MIN_BOOTSTRAP {
            return bad(format!("bootstrap_samples must be >= {MIN_BOOTSTRAP}"));
        }
        if self.max_neurons < NEURON_RANGE.0 || self.max_neurons > NEURON_RANGE.1 {
            return bad(format!(
                "max_neurons outside [{}, {}]",
                NEURON_RANGE.0, NEURON_RANGE.1
            ));
        }
        if self.roster.is_empty() {
            return bad("empty model roster".into());
        }
        if self.has(ModelKind::Lear) && self.lear_windows.is_empty() {
            return bad("LEAR needs at least one calibration window".into());
        }
        let eval_start = test_start + self.qr_window;
        if eval_start >= test_end {
            return bad(format!(
                "{} test days leave nothing after the {}-day QR warm-up",
                test_end - test_start,
                self.qr_window
            ));
        }
        let longest = self
            .lear_windows
            .iter()
            .copied()
            .filter(|_| self.has(ModelKind::Lear))
            .chain([self.window])
            .max();
        if test_start < longest.unwrap_or(0) + MIN_LAG_DAY {
            return bad(format!(
                "test_start {test_start} leaves no room for a {}-day window",
                longest.unwrap_or(0)
            ));
        }
        let mut validation_start = test_start;
        if !self.neural_models().is_empty() {
            if self.validation_days == 0 || !self.validation_days.is_multiple_of(VALIDATION_BLOCK) {
                return bad(format!(
                    "validation_days must be a positive multiple of {VALIDATION_BLOCK}"
                ));
            }
            if test_start < self.validation_days + self.tuning_window + MIN_LAG_DAY {
                return bad("not enough history before test_start for tuning".into());
            }
            validation_start = test_start - self.validation_days;
        }
        Ok(Timeline {
            validation_start,
            test_start,
            eval_start,
            test_end,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
test_start = 518
test_end = "2017-03-10"
validation_days = 28
tuning_window = 400
window = 400
lear_windows = [56, 84, 300, 400]
runs = 2
trials = 64
roster = ["naive", "lear", "prob-jsu"]

[data.synthetic]
n_days = 800
seed = 7
noise = { family = "jsu", scale = 5.0, nu = -1.0, tau = 1.5 }

[train]
max_epochs = 300
patience = 20
"#;

    #[test]
    fn parses_and_resolves() {
        let cfg = StudyConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.qr_window, 182);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.max_epochs, 300);
        let ds = cfg.data.load().unwrap();
        let tl = cfg.timeline(&ds).unwrap();
        // 2015-01-01 + 799 days
        assert_eq!(tl.test_end, 800);
        assert_eq!(
            (tl.test_start, tl.eval_start, tl.validation_start),
            (518, 700, 490)
        );
        assert_eq!(cfg.neural_models(), vec![ModelKind::ProbJsu]);
    }

    #[test]
    fn hash_ignores_threads_and_output() {
        let a = StudyConfig::from_toml(EXAMPLE).unwrap();
        let mut b = a.clone();
        b.threads = Some(3);
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let back = StudyConfig::from_toml(&a.to_toml()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn rejects_bad_timelines() {
        let mut cfg = StudyConfig::from_toml(EXAMPLE).unwrap();
        let ds = cfg.data.load().unwrap();
        cfg.validation_days = 30;
        assert!(cfg.timeline(&ds).is_err());
        cfg.validation_days = 28;
        cfg.test_start = DayRef::Index(750);
        assert!(cfg.timeline(&ds).is_err());
        cfg.test_start = DayRef::Index(300);
        assert!(cfg.timeline(&ds).is_err());
    }
}
