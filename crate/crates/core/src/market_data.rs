//! Hourly market data: ingestion, calendar logic, regressor assembly,
//! standardization and a seeded synthetic market generator.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{DistSpec, Family};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const HOURS: usize = 24;

/// Earliest day index for which every lag used by the regressors exists.
pub const MIN_LAG_DAY: usize = 7;

pub type DayRow = [f64; HOURS];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("unparseable timestamp `{0}`")]
    Timestamp(String),
    #[error("missing hour: expected {expected}, found {found}")]
    Gap {
        expected: NaiveDateTime,
        found: NaiveDateTime,
    },
    #[error("duplicate or out-of-order timestamp {0}")]
    Duplicate(NaiveDateTime),
    #[error("day {date} has {hours} hourly rows, expected 24")]
    PartialDay { date: NaiveDate, hours: usize },
    #[error("invalid value `{value}` in column {column} at {timestamp}")]
    Value {
        column: &'static str,
        timestamp: NaiveDateTime,
        value: String,
    },
    #[error("day index {t} lacks lag history (need t >= {MIN_LAG_DAY})")]
    LagUnavailable { t: usize },
    #[error("day index {t} beyond dataset of {n} days")]
    OutOfRange { t: usize, n: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Aligned hourly market series, one row of 24 values per calendar day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketDataset {
    pub days: Vec<NaiveDate>,
    pub prices: Vec<DayRow>,
    pub load_fc: Vec<DayRow>,
    pub res_fc: Vec<DayRow>,
    pub eua: Vec<f64>,
    pub coal: Vec<f64>,
    pub gas: Vec<f64>,
    pub oil: Vec<f64>,
    /// ISO weekday, 1 = Monday .. 7 = Sunday.
    pub dow: Vec<u8>,
}

impl MarketDataset {
    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    /// Checks equal lengths, consecutive dates, finite values and weekdays.
    pub fn validate(&self) -> Result<()> {
        let n = self.days.len();
        let lens = [
            self.prices.len(),
            self.load_fc.len(),
            self.res_fc.len(),
            self.eua.len(),
            self.coal.len(),
            self.gas.len(),
            self.oil.len(),
            self.dow.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(DataError::Invalid(format!(
                "series lengths differ: {n} days vs {lens:?}"
            )));
        }
        for w in self.days.windows(2) {
            if w[1] != w[0] + Duration::days(1) {
                return Err(DataError::Invalid(format!(
                    "days {} and {} not consecutive",
                    w[0], w[1]
                )));
            }
        }
        for (d, date) in self.days.iter().enumerate() {
            if self.dow[d] as u32 != date.weekday().number_from_monday() {
                return Err(DataError::Invalid(format!("weekday mismatch on {date}")));
            }
            let finite = self.prices[d]
                .iter()
                .chain(&self.load_fc[d])
                .chain(&self.res_fc[d])
                .all(|v| v.is_finite())
                && [self.eua[d], self.coal[d], self.gas[d], self.oil[d]]
                    .iter()
                    .all(|v| v.is_finite());
            if !finite {
                return Err(DataError::Invalid(format!("non-finite value on {date}")));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let first = *self.days.first()?;
        let idx = (date - first).num_days();
        (idx >= 0 && (idx as usize) < self.days.len()).then_some(idx as usize)
    }
}

/// Read access to market data by field and day, so that consumers can be run
/// against a tracing wrapper in leakage tests.
pub trait MarketView: Sync {
    fn n_days(&self) -> usize;
    fn date(&self, day: usize) -> NaiveDate;
    fn prices(&self, day: usize) -> &DayRow;
    fn load_fc(&self, day: usize) -> &DayRow;
    fn res_fc(&self, day: usize) -> &DayRow;
    fn eua(&self, day: usize) -> f64;
    fn coal(&self, day: usize) -> f64;
    fn gas(&self, day: usize) -> f64;
    fn oil(&self, day: usize) -> f64;
    fn dow(&self, day: usize) -> u8;
}

impl MarketView for MarketDataset {
    fn n_days(&self) -> usize {
        self.days.len()
    }
    fn date(&self, day: usize) -> NaiveDate {
        self.days[day]
    }
    fn prices(&self, day: usize) -> &DayRow {
        &self.prices[day]
    }
    fn load_fc(&self, day: usize) -> &DayRow {
        &self.load_fc[day]
    }
    fn res_fc(&self, day: usize) -> &DayRow {
        &self.res_fc[day]
    }
    fn eua(&self, day: usize) -> f64 {
        self.eua[day]
    }
    fn coal(&self, day: usize) -> f64 {
        self.coal[day]
    }
    fn gas(&self, day: usize) -> f64 {
        self.gas[day]
    }
    fn oil(&self, day: usize) -> f64 {
        self.oil[day]
    }
    fn dow(&self, day: usize) -> u8 {
        self.dow[day]
    }
}

/// Dataset column touched by a [`TracedView`] read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Field {
    Price,
    Load,
    Res,
    Eua,
    Coal,
    Gas,
    Oil,
}

/// Wraps a dataset and records the latest day read per field. Calendar
/// lookups (`date`, `dow`) are not traced.
pub struct TracedView<'a> {
    inner: &'a MarketDataset,
    max_read: std::sync::Mutex<[Option<usize>; 7]>,
}

impl<'a> TracedView<'a> {
    pub fn new(inner: &'a MarketDataset) -> Self {
        Self {
            inner,
            max_read: std::sync::Mutex::new([None; 7]),
        }
    }

    fn touch(&self, field: Field, day: usize) {
        let mut g = self.max_read.lock().expect("trace lock");
        let slot = &mut g[field as usize];
        *slot = Some(slot.map_or(day, |d| d.max(day)));
    }

    /// Latest day index read for `field`, if any.
    pub fn max_day(&self, field: Field) -> Option<usize> {
        self.max_read.lock().expect("trace lock")[field as usize]
    }

    pub fn reset(&self) {
        *self.max_read.lock().expect("trace lock") = [None; 7];
    }
}

impl MarketView for TracedView<'_> {
    fn n_days(&self) -> usize {
        self.inner.n_days()
    }
    fn date(&self, day: usize) -> NaiveDate {
        self.inner.days[day]
    }
    fn prices(&self, day: usize) -> &DayRow {
        self.touch(Field::Price, day);
        &self.inner.prices[day]
    }
    fn load_fc(&self, day: usize) -> &DayRow {
        self.touch(Field::Load, day);
        &self.inner.load_fc[day]
    }
    fn res_fc(&self, day: usize) -> &DayRow {
        self.touch(Field::Res, day);
        &self.inner.res_fc[day]
    }
    fn eua(&self, day: usize) -> f64 {
        self.touch(Field::Eua, day);
        self.inner.eua[day]
    }
    fn coal(&self, day: usize) -> f64 {
        self.touch(Field::Coal, day);
        self.inner.coal[day]
    }
    fn gas(&self, day: usize) -> f64 {
        self.touch(Field::Gas, day);
        self.inner.gas[day]
    }
    fn oil(&self, day: usize) -> f64 {
        self.touch(Field::Oil, day);
        self.inner.oil[day]
    }
    fn dow(&self, day: usize) -> u8 {
        self.inner.dow[day]
    }
}

// ---------------------------------------------------------------------------
// Regressors

/// The fourteen regressor groups, in assembly order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureGroup {
    PriceLag1,
    PriceLag2,
    PriceLag3,
    PriceLag7,
    Load,
    LoadLag1,
    LoadLag7,
    Res,
    ResLag1,
    Eua,
    Coal,
    Gas,
    Oil,
    DayOfWeek,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 14] = [
        FeatureGroup::PriceLag1,
        FeatureGroup::PriceLag2,
        FeatureGroup::PriceLag3,
        FeatureGroup::PriceLag7,
        FeatureGroup::Load,
        FeatureGroup::LoadLag1,
        FeatureGroup::LoadLag7,
        FeatureGroup::Res,
        FeatureGroup::ResLag1,
        FeatureGroup::Eua,
        FeatureGroup::Coal,
        FeatureGroup::Gas,
        FeatureGroup::Oil,
        FeatureGroup::DayOfWeek,
    ];

    pub fn len(self) -> usize {
        use FeatureGroup::*;
        match self {
            Eua | Coal | Gas | Oil => 1,
            DayOfWeek => 7,
            _ => HOURS,
        }
    }

    pub fn name(self) -> &'static str {
        use FeatureGroup::*;
        match self {
            PriceLag1 => "price_lag1",
            PriceLag2 => "price_lag2",
            PriceLag3 => "price_lag3",
            PriceLag7 => "price_lag7",
            Load => "load",
            LoadLag1 => "load_lag1",
            LoadLag7 => "load_lag7",
            Res => "res",
            ResLag1 => "res_lag1",
            Eua => "eua_lag2",
            Coal => "coal_lag2",
            Gas => "gas_lag2",
            Oil => "oil_lag2",
            DayOfWeek => "dow",
        }
    }

    fn write(self, view: &dyn MarketView, t: usize, out: &mut Vec<f64>) {
        use FeatureGroup::*;
        match self {
            PriceLag1 => out.extend_from_slice(view.prices(t - 1)),
            PriceLag2 => out.extend_from_slice(view.prices(t - 2)),
            PriceLag3 => out.extend_from_slice(view.prices(t - 3)),
            PriceLag7 => out.extend_from_slice(view.prices(t - 7)),
            Load => out.extend_from_slice(view.load_fc(t)),
            LoadLag1 => out.extend_from_slice(view.load_fc(t - 1)),
            LoadLag7 => out.extend_from_slice(view.load_fc(t - 7)),
            Res => out.extend_from_slice(view.res_fc(t)),
            ResLag1 => out.extend_from_slice(view.res_fc(t - 1)),
            // closes of day T-2 are the latest known when bidding on T-1
            Eua => out.push(view.eua(t - 2)),
            Coal => out.push(view.coal(t - 2)),
            Gas => out.push(view.gas(t - 2)),
            Oil => out.push(view.oil(t - 2)),
            DayOfWeek => {
                let d = view.dow(t) as usize;
                out.extend((1..=7).map(|k| if k == d { 1.0 } else { 0.0 }));
            }
        }
    }
}

/// Inclusion flags for the fourteen regressor groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask(pub [bool; 14]);

impl FeatureMask {
    pub fn all() -> Self {
        Self([true; 14])
    }

    pub fn only(groups: &[FeatureGroup]) -> Self {
        let mut flags = [false; 14];
        for g in groups {
            flags[*g as usize] = true;
        }
        Self(flags)
    }

    pub fn contains(&self, g: FeatureGroup) -> bool {
        self.0[g as usize]
    }

    pub fn groups(&self) -> impl Iterator<Item = FeatureGroup> + '_ {
        FeatureGroup::ALL.into_iter().filter(|g| self.contains(*g))
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&f| f) {
            Ok(())
        } else {
            Err(DataError::Invalid(
                "feature mask must enable at least one group".into(),
            ))
        }
    }

    /// Length of the assembled regressor vector.
    pub fn feature_len(&self) -> usize {
        self.groups().map(FeatureGroup::len).sum()
    }

    pub fn layout(&self) -> Vec<GroupSlot> {
        let mut offset = 0;
        self.groups()
            .map(|group| {
                let slot = GroupSlot {
                    group,
                    offset,
                    len: group.len(),
                };
                offset += slot.len;
                slot
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSlot {
    pub group: FeatureGroup,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: Vec<GroupSlot>,
}

/// Regressors available before the auction for target day `t`.
pub fn assemble_features(
    view: &dyn MarketView,
    t: usize,
    mask: &FeatureMask,
) -> Result<FeatureVector> {
    mask.validate()?;
    if t < MIN_LAG_DAY {
        return Err(DataError::LagUnavailable { t });
    }
    if t >= view.n_days() {
        return Err(DataError::OutOfRange {
            t,
            n: view.n_days(),
        });
    }
    let mut values = Vec::with_capacity(mask.feature_len());
    for g in mask.groups() {
        g.write(view, t, &mut values);
    }
    Ok(FeatureVector {
        values,
        layout: mask.layout(),
    })
}

/// Regressor rows for each of `days`, stacked into a matrix.
pub fn feature_matrix(
    view: &dyn MarketView,
    days: &[usize],
    mask: &FeatureMask,
) -> Result<Matrix<f64>> {
    let mut data = Vec::with_capacity(days.len() * mask.feature_len());
    for &d in days {
        data.extend(assemble_features(view, d, mask)?.values);
    }
    Ok(Matrix::from_vec(days.len(), mask.feature_len(), data))
}

/// Price rows for each of `days`.
pub fn target_matrix(view: &dyn MarketView, days: &[usize]) -> Matrix<f64> {
    let mut data = Vec::with_capacity(days.len() * HOURS);
    for &d in days {
        data.extend_from_slice(view.prices(d));
    }
    Matrix::from_vec(days.len(), HOURS, data)
}

// ---------------------------------------------------------------------------
// Standardization

pub const SCALER_STD_FLOOR: f64 = 1e-8;

/// Column-wise z-score transform fitted on a training window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Scaler<T: Scalar> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> Scaler<T> {
    /// Fits means and population standard deviations; needs at least two rows.
    pub fn fit(x: &Matrix<T>) -> Result<Self> {
        if x.rows() < 2 || x.cols() == 0 {
            return Err(DataError::Invalid(format!(
                "scaler needs >= 2 rows and >= 1 column, got {}x{}",
                x.rows(),
                x.cols()
            )));
        }
        let n = T::from_usize_lossy(x.rows());
        let mut mean = vec![T::zero(); x.cols()];
        for i in 0..x.rows() {
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); x.cols()];
        for i in 0..x.rows() {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let floor = T::lit(SCALER_STD_FLOOR);
        let std = var.into_iter().map(|s| (s / n).sqrt().max(floor)).collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut out = x.clone();
        for i in 0..out.rows() {
            self.transform_row(out.row_mut(i));
        }
        out
    }

    pub fn transform_row(&self, row: &mut [T]) {
        for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn inverse_transform(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut out = x.clone();
        for i in 0..out.rows() {
            for ((v, &m), &s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// CSV

const CSV_HEADER: [&str; 8] = [
    "timestamp",
    "price",
    "load_fc",
    "res_fc",
    "eua",
    "coal",
    "gas",
    "oil",
];
const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    let s = s.strip_suffix('Z').unwrap_or(s);
    for fmt in [
        TS_FORMAT,
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(ts) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(ts);
        }
    }
    Err(DataError::Timestamp(s.to_string()))
}

/// Reads the hourly CSV (`timestamp,price,load_fc,res_fc,eua,coal,gas,oil`).
pub fn load_hourly_csv(path: impl AsRef<Path>) -> Result<MarketDataset> {
    read_hourly_csv(File::open(path)?)
}

pub fn read_hourly_csv<R: Read>(reader: R) -> Result<MarketDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(DataError::Header {
            expected: CSV_HEADER.join(","),
            found: header.join(","),
        });
    }
    let mut ds = MarketDataset {
        days: vec![],
        prices: vec![],
        load_fc: vec![],
        res_fc: vec![],
        eua: vec![],
        coal: vec![],
        gas: vec![],
        oil: vec![],
        dow: vec![],
    };
    let mut prev: Option<NaiveDateTime> = None;
    let mut hour_in_day = 0usize;
    let (mut p, mut l, mut r) = ([0.0; HOURS], [0.0; HOURS], [0.0; HOURS]);
    for rec in rdr.records() {
        let rec = rec?;
        let ts = parse_timestamp(rec.get(0).unwrap_or_default())?;
        match prev {
            None => {
                if ts.time() != NaiveTime::MIN {
                    return Err(DataError::PartialDay {
                        date: ts.date(),
                        hours: HOURS - ts.hour() as usize,
                    });
                }
            }
            Some(prev_ts) => {
                let expected = prev_ts + Duration::hours(1);
                if ts < expected {
                    return Err(DataError::Duplicate(ts));
                }
                if ts > expected {
                    return Err(DataError::Gap {
                        expected,
                        found: ts,
                    });
                }
            }
        }
        prev = Some(ts);
        let mut vals = [0.0; 7];
        for (k, v) in vals.iter_mut().enumerate() {
            let raw = rec.get(k + 1).unwrap_or_default();
            *v = raw
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| DataError::Value {
                    column: CSV_HEADER[k + 1],
                    timestamp: ts,
                    value: raw.to_string(),
                })?;
        }
        let h = ts.hour() as usize;
        p[h] = vals[0];
        l[h] = vals[1];
        r[h] = vals[2];
        if h == 0 {
            let date = ts.date();
            ds.days.push(date);
            ds.dow.push(date.weekday().number_from_monday() as u8);
            ds.eua.push(vals[3]);
            ds.coal.push(vals[4]);
            ds.gas.push(vals[5]);
            ds.oil.push(vals[6]);
        }
        hour_in_day = h + 1;
        if h == HOURS - 1 {
            ds.prices.push(p);
            ds.load_fc.push(l);
            ds.res_fc.push(r);
        }
    }
    if hour_in_day != HOURS {
        if let Some(ts) = prev {
            return Err(DataError::PartialDay {
                date: ts.date(),
                hours: hour_in_day,
            });
        }
    }
    if ds.days.is_empty() {
        return Err(DataError::Invalid("no rows".into()));
    }
    Ok(ds)
}

/// Writes the dataset in the same CSV layout [`load_hourly_csv`] reads.
pub fn write_hourly_csv<W: Write>(ds: &MarketDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for d in 0..ds.n_days() {
        for h in 0..HOURS {
            let ts = ds.days[d].and_hms_opt(h as u32, 0, 0).expect("valid hour");
            w.write_record([
                ts.format(TS_FORMAT).to_string(),
                ds.prices[d][h].to_string(),
                ds.load_fc[d][h].to_string(),
                ds.res_fc[d][h].to_string(),
                ds.eua[d].to_string(),
                ds.coal[d].to_string(),
                ds.gas[d].to_string(),
                ds.oil[d].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_hourly_csv(ds: &MarketDataset, path: impl AsRef<Path>) -> Result<()> {
    write_hourly_csv(ds, File::create(path)?)
}

// ---------------------------------------------------------------------------
// Synthetic market

/// Shape of the price noise; `scale` multiplies a heteroskedastic factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub family: Family,
    pub scale: f64,
    #[serde(default)]
    pub nu: f64,
    #[serde(default = "one")]
    pub tau: f64,
}

fn one() -> f64 {
    1.0
}

impl NoiseSpec {
    /// Zero-mean shape distribution scaled to `scale`.
    fn unit(&self) -> DistSpec<f64> {
        match self.family {
            Family::Normal => DistSpec::normal(0.0, 1.0),
            Family::Jsu => DistSpec::jsu(0.0, 1.0, self.nu, self.tau),
        }
    }
}

/// Coefficients of the linear price equation
/// `price = intercept + load * (L - 55000)/1000 + res * RES/1000
///          + ar * price_{d-1} + fuel * gas_d + noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceEquation {
    pub intercept: f64,
    pub load: f64,
    pub res: f64,
    pub ar: f64,
    pub fuel: f64,
    /// Log-scale sensitivity of the noise scale to standardized load.
    pub heteroskedasticity: f64,
}

impl Default for PriceEquation {
    fn default() -> Self {
        Self {
            intercept: 14.0,
            load: 1.2,
            res: -0.6,
            ar: 0.5,
            fuel: 1.0,
            heteroskedasticity: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_days: usize,
    #[serde(default = "default_start")]
    pub start_date: NaiveDate,
    pub seed: u64,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub equation: PriceEquation,
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2015, 1, 1).expect("valid date")
}

impl SyntheticConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DataError::Invalid(format!("synthetic config: {e}")))
    }
}

/// Generated dataset plus the quantities needed to check it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMarket {
    pub dataset: MarketDataset,
    pub config: SyntheticConfig,
    /// Deterministic part of each price (the linear equation without noise).
    pub mean: Vec<DayRow>,
    /// Noise scale multiplying the unit noise draw.
    pub noise_scale: Vec<DayRow>,
}

const LOAD_LEVEL: f64 = 55_000.0;
const LOAD_SWING: f64 = 9_000.0;

/// Seeded synthetic market with daily/weekly/annual load and renewables
/// patterns and a linear price equation with heteroskedastic noise.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticMarket> {
    if cfg.n_days < 30 {
        return Err(DataError::Invalid(format!(
            "n_days must be >= 30, got {}",
            cfg.n_days
        )));
    }
    let noise = &cfg.noise;
    if !(noise.scale >= 0.0) || !(noise.tau > 0.0) || !noise.nu.is_finite() {
        return Err(DataError::Invalid("noise needs scale >= 0, tau > 0".into()));
    }
    let eq = &cfg.equation;
    if !(eq.ar.abs() < 1.0) {
        return Err(DataError::Invalid(
            "autoregressive coefficient must satisfy |ar| < 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };
    let unit = noise.unit();
    let unit_mean = unit.mean().expect("parametric");
    let unit_sd = unit.variance().expect("parametric").sqrt();

    let n = cfg.n_days;
    let mut ds = MarketDataset {
        days: Vec::with_capacity(n),
        prices: Vec::with_capacity(n),
        load_fc: Vec::with_capacity(n),
        res_fc: Vec::with_capacity(n),
        eua: Vec::with_capacity(n),
        coal: Vec::with_capacity(n),
        gas: Vec::with_capacity(n),
        oil: Vec::with_capacity(n),
        dow: Vec::with_capacity(n),
    };
    let mut mean_rows = Vec::with_capacity(n);
    let mut scale_rows = Vec::with_capacity(n);

    let tau = std::f64::consts::TAU;
    let (mut eua, mut coal, mut gas, mut oil) = (8.0_f64, 60.0_f64, 18.0_f64, 55.0_f64);
    let mut wind_state = 0.0_f64;
    let steady = (eq.intercept + eq.res * 20.0 + eq.fuel * gas) / (1.0 - eq.ar);
    let mut prev_price = [steady; HOURS];

    for d in 0..n {
        let date = cfg.start_date + Duration::days(d as i64);
        let dow = date.weekday().number_from_monday() as u8;
        let season = (tau * d as f64 / 365.25).cos();
        let summer = (tau * (d as f64 - 80.0) / 365.25).sin();
        let weekend = match dow {
            6 => 0.6,
            7 => 1.0,
            _ => 0.0,
        };
        if d > 0 {
            eua *= (0.02 * normal()).exp();
            coal *= (0.015 * normal()).exp();
            gas *= (0.02 * normal()).exp();
            oil *= (0.015 * normal()).exp();
        }
        wind_state = 0.7 * wind_state + 0.5 * normal();
        let wind = 15_000.0 * wind_state.exp();

        let mut load = [0.0; HOURS];
        let mut res = [0.0; HOURS];
        let mut price = [0.0; HOURS];
        let mut mean = [0.0; HOURS];
        let mut scale = [0.0; HOURS];
        for h in 0..HOURS {
            let hour_angle = tau * h as f64 / HOURS as f64;
            load[h] = LOAD_LEVEL - LOAD_SWING * hour_angle.cos() + 4_000.0 * season
                - 7_000.0 * weekend
                + 1_500.0 * normal();
            let solar = if (6..=18).contains(&h) {
                (std::f64::consts::PI * (h as f64 - 6.0) / 12.0).sin()
            } else {
                0.0
            };
            res[h] = (wind * (1.0 + 0.1 * hour_angle.sin()) + solar * (8_000.0 + 6_000.0 * summer))
                .max(500.0);

            mean[h] = eq.intercept
                + eq.load * (load[h] - LOAD_LEVEL) / 1000.0
                + eq.res * res[h] / 1000.0
                + eq.ar * prev_price[h]
                + eq.fuel * gas;
            let z_load = (load[h] - LOAD_LEVEL) / LOAD_SWING;
            scale[h] = noise.scale * (eq.heteroskedasticity * z_load).exp();
            // a draw always happens so the stream does not depend on the scale
            let z = normal();
            let shock = match noise.family {
                Family::Normal => z,
                Family::Jsu => ((z - noise.nu) / noise.tau).sinh(),
            };
            price[h] = mean[h] + scale[h] * (shock - unit_mean) / unit_sd;
        }
        prev_price = price;
        ds.days.push(date);
        ds.dow.push(dow);
        ds.prices.push(price);
        ds.load_fc.push(load);
        ds.res_fc.push(res);
        ds.eua.push(eua);
        ds.coal.push(coal);
        ds.gas.push(gas);
        ds.oil.push(oil);
        mean_rows.push(mean);
        scale_rows.push(scale);
    }
    Ok(SyntheticMarket {
        dataset: ds,
        config: cfg.clone(),
        mean: mean_rows,
        noise_scale: scale_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_market(seed: u64) -> SyntheticMarket {
        generate_synthetic(&SyntheticConfig {
            n_days: 60,
            start_date: NaiveDate::from_ymd_opt(2015, 1, 5).unwrap(),
            seed,
            noise: NoiseSpec {
                family: Family::Normal,
                scale: 3.0,
                nu: 0.0,
                tau: 1.0,
            },
            equation: PriceEquation::default(),
        })
        .unwrap()
    }

    fn csv_for_hours(start: NaiveDateTime, hours: usize, skip: Option<usize>) -> String {
        let mut s = String::from("timestamp,price,load_fc,res_fc,eua,coal,gas,oil\n");
        for k in 0..hours {
            if Some(k) == skip {
                continue;
            }
            let ts = start + Duration::hours(k as i64);
            s.push_str(&format!(
                "{},{},{},{},8,60,18,55\n",
                ts.format(TS_FORMAT),
                k,
                50000 + k,
                1000 + k
            ));
        }
        s
    }

    #[test]
    fn two_days_from_monday() {
        let start = NaiveDate::from_ymd_opt(2015, 1, 5)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let ds = read_hourly_csv(csv_for_hours(start, 48, None).as_bytes()).unwrap();
        assert_eq!(ds.n_days(), 2);
        assert_eq!(ds.dow, vec![1, 2]);
        assert_eq!(ds.prices[1][0], 24.0);
        ds.validate().unwrap();
    }

    #[test]
    fn missing_hour_is_reported() {
        let start = NaiveDate::from_ymd_opt(2015, 3, 29)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let err = read_hourly_csv(csv_for_hours(start, 48, Some(2)).as_bytes()).unwrap_err();
        assert!(err.to_string().contains("2015-03-29 02:00:00"), "{err}");
        assert!(matches!(err, DataError::Gap { .. }));
    }

    #[test]
    fn duplicate_and_partial_days() {
        let start = NaiveDate::from_ymd_opt(2015, 1, 5)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let mut text = csv_for_hours(start, 24, None);
        text.push_str("2015-01-05T23:00:00,1,1,1,1,1,1,1\n");
        assert!(matches!(
            read_hourly_csv(text.as_bytes()),
            Err(DataError::Duplicate(_))
        ));
        let partial = csv_for_hours(start, 30, None);
        assert!(matches!(
            read_hourly_csv(partial.as_bytes()),
            Err(DataError::PartialDay { hours: 6, .. })
        ));
        let bad_header = "ts,price\n";
        assert!(matches!(
            read_hourly_csv(bad_header.as_bytes()),
            Err(DataError::Header { .. })
        ));
    }

    #[test]
    fn six_year_calendar() {
        let start = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
        let end = NaiveDate::from_ymd_opt(2020, 12, 31).unwrap();
        // 365 * 6 + two leap days (2016, 2020)
        let expected = 365 * 6 + 2;
        assert_eq!((end - start).num_days() + 1, expected);
        let mut csv = String::from("timestamp,price,load_fc,res_fc,eua,coal,gas,oil\n");
        let mut ts = start.and_hms_opt(0, 0, 0).unwrap();
        while ts.date() <= end {
            csv.push_str(&format!("{},1,2,3,4,5,6,7\n", ts.format(TS_FORMAT)));
            ts += Duration::hours(1);
        }
        let ds = read_hourly_csv(csv.as_bytes()).unwrap();
        assert_eq!(ds.n_days(), 2192);
        assert_eq!(ds.prices.len(), 2192);
    }

    #[test]
    fn csv_roundtrip_is_identity() {
        let ds = small_market(3).dataset;
        let mut buf = Vec::new();
        write_hourly_csv(&ds, &mut buf).unwrap();
        let back = read_hourly_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn feature_lengths_and_layout() {
        let ds = small_market(1).dataset;
        let fv = assemble_features(&ds, 10, &FeatureMask::all()).unwrap();
        assert_eq!(fv.values.len(), 227);
        let mut covered = 0;
        for slot in &fv.layout {
            assert_eq!(slot.offset, covered);
            covered += slot.len;
        }
        assert_eq!(covered, 227);

        let only_lag1 =
            assemble_features(&ds, 10, &FeatureMask::only(&[FeatureGroup::PriceLag1])).unwrap();
        assert_eq!(only_lag1.values, ds.prices[9].to_vec());

        assert!(matches!(
            assemble_features(&ds, 6, &FeatureMask::all()),
            Err(DataError::LagUnavailable { t: 6 })
        ));
        assert!(assemble_features(&ds, 10, &FeatureMask([false; 14])).is_err());
    }

    #[test]
    fn dow_one_hot_on_sunday() {
        let ds = small_market(1).dataset;
        let sunday = (7..ds.n_days()).find(|&d| ds.dow[d] == 7).unwrap();
        let fv =
            assemble_features(&ds, sunday, &FeatureMask::only(&[FeatureGroup::DayOfWeek])).unwrap();
        assert_eq!(fv.values, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn assembly_reads_only_the_information_set() {
        let ds = small_market(2).dataset;
        let view = TracedView::new(&ds);
        for t in 7..ds.n_days() {
            view.reset();
            assemble_features(&view, t, &FeatureMask::all()).unwrap();
            assert_eq!(view.max_day(Field::Price), Some(t - 1));
            assert_eq!(view.max_day(Field::Load), Some(t));
            assert_eq!(view.max_day(Field::Res), Some(t));
            for f in [Field::Eua, Field::Coal, Field::Gas, Field::Oil] {
                assert_eq!(view.max_day(f), Some(t - 2));
            }
        }
    }

    #[test]
    fn scaler_examples() {
        let x = Matrix::from_vec(3, 1, vec![1.0, 1.0, 1.0]);
        let s = Scaler::fit(&x).unwrap();
        assert_eq!(s.transform(&x).as_slice(), &[0.0, 0.0, 0.0]);
        let y = Matrix::from_vec(2, 1, vec![0.0, 2.0]);
        let s = Scaler::fit(&y).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.transform(&y).as_slice(), &[-1.0, 1.0]);
        assert!(Scaler::fit(&Matrix::<f64>::zeros(1, 3)).is_err());
        assert!(Scaler::fit(&Matrix::<f64>::zeros(0, 0)).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(small_market(9), small_market(9));
        assert_ne!(
            small_market(9).dataset.prices,
            small_market(10).dataset.prices
        );
        small_market(9).dataset.validate().unwrap();
    }

    #[test]
    fn zero_noise_reproduces_linear_equation() {
        let cfg = SyntheticConfig {
            n_days: 40,
            start_date: default_start(),
            seed: 4,
            noise: NoiseSpec {
                family: Family::Jsu,
                scale: 0.0,
                nu: -1.0,
                tau: 1.5,
            },
            equation: PriceEquation::default(),
        };
        let m = generate_synthetic(&cfg).unwrap();
        let ds = &m.dataset;
        let eq = &cfg.equation;
        for d in 1..ds.n_days() {
            for h in 0..HOURS {
                let formula = eq.intercept
                    + eq.load * (ds.load_fc[d][h] - LOAD_LEVEL) / 1000.0
                    + eq.res * ds.res_fc[d][h] / 1000.0
                    + eq.ar * ds.prices[d - 1][h]
                    + eq.fuel * ds.gas[d];
                assert_eq!(ds.prices[d][h], formula);
            }
        }
        assert!(generate_synthetic(&SyntheticConfig { n_days: 10, ..cfg }).is_err());
    }

    #[test]
    fn config_parses_from_toml() {
        let cfg = SyntheticConfig::from_toml(
            "n_days = 100\nseed = 7\n[noise]\nfamily = \"jsu\"\nscale = 4.0\nnu = -1.0\ntau = 1.5\n",
        )
        .unwrap();
        assert_eq!(cfg.noise.family, Family::Jsu);
        assert_eq!(cfg.equation, PriceEquation::default());
        assert!(SyntheticConfig::from_toml("n_days = 1\nseed = 1\nbogus = 2\n").is_err());
    }
}
