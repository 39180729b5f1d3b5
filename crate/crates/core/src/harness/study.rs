//! The rolling out-of-sample study over the whole model roster.

use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;

use crate::benchmarks::bootstrap::bootstrap_distributions;
use crate::benchmarks::lear::{ensemble_mean, LearFit};
use crate::benchmarks::naive::{naive_forecast, naive_residuals};
use crate::benchmarks::qra::{committee_column, qra_forecast};
use crate::distributions::{DistSpec, Family};
use crate::dmlp::{fit_window, window_days, DayForecast};
use crate::ensembling::{quantile_average, QuantileStat};
use crate::market_data::{MarketDataset, MarketView, HOURS};
use crate::matrix::Matrix;

use super::config::{ModelKind, SearchKind, StudyConfig, Timeline};
use super::report::{evaluate_study, write_report, StudyReport};
use super::store::{ForecastStore, Gap};
use super::tpe::TpeSearch;
use super::tuning::{
    tune_hyperparameters, RandomSearch, SearchSpace, SearchStrategy, TunedSets, TuningSetup,
};
use super::{derive_seed, HarnessError, Result};

pub const HYPERPARAMS_FILE: &str = "hyperparams.json";
pub const STORE_DIR: &str = "store";
pub const REPORT_DIR: &str = "report";

pub const LEAR_ENS: &str = "LEAR-Ens";
pub const LEAR_QRA: &str = "LEAR-QRA";
pub const LEAR_QRM: &str = "LEAR-QRM";
pub const NN_ENS: &str = "NN-Point-Ens";
pub const NN_QRA: &str = "NN-QRA";
pub const NN_QRM: &str = "NN-QRM";

pub fn lear_name(window: usize) -> String {
    format!("LEAR-{window}")
}

pub fn family_kind(family: Family) -> ModelKind {
    match family {
        Family::Normal => ModelKind::ProbNormal,
        Family::Jsu => ModelKind::ProbJsu,
    }
}

pub fn p_ens_name(kind: ModelKind) -> String {
    format!("{}-pEns", kind.name())
}

pub fn q_ens_name(kind: ModelKind) -> String {
    format!("{}-qEns", kind.name())
}

/// Store series `(model, run)` the study produces, in store order.
pub fn roster_series(cfg: &StudyConfig) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    if cfg.has(ModelKind::Naive) {
        out.push((ModelKind::Naive.name().to_string(), 0));
    }
    if cfg.has(ModelKind::Lear) {
        out.extend(cfg.lear_windows.iter().map(|&w| (lear_name(w), 0)));
        out.extend([LEAR_ENS, LEAR_QRA, LEAR_QRM].map(|m| (m.to_string(), 0)));
    }
    for kind in cfg.neural_models() {
        out.extend((1..=cfg.runs).map(|r| (kind.name().to_string(), r)));
        if kind == ModelKind::NnPoint {
            out.extend([NN_ENS, NN_QRA, NN_QRM].map(|m| (m.to_string(), 0)));
        } else {
            out.push((p_ens_name(kind), 0));
            out.push((q_ens_name(kind), 0));
        }
    }
    out.sort();
    out
}

/// True for series that exist only after the QR warm-up.
pub fn is_qr_series(model: &str) -> bool {
    [LEAR_QRA, LEAR_QRM, NN_QRA, NN_QRM].contains(&model)
}

/// Tunes every neural model and run.
pub fn tune_all(cfg: &StudyConfig, ds: &MarketDataset, tl: &Timeline) -> Result<TunedSets> {
    let space = SearchSpace::with_max_neurons(cfg.max_neurons);
    let jobs: Vec<(ModelKind, usize)> = cfg
        .neural_models()
        .into_iter()
        .flat_map(|k| (1..=cfg.runs).map(move |r| (k, r)))
        .collect();
    let outcomes = jobs
        .into_par_iter()
        .map(|(kind, run)| {
            let head = kind.head().expect("neural model");
            let setup = TuningSetup {
                head,
                validation_start: tl.validation_start,
                validation_days: cfg.validation_days,
                tuning_window: cfg.tuning_window,
                train: cfg.train.clone(),
                seed: derive_seed(cfg.seed, kind.name(), &[run as u64, 0]),
            };
            let search_seed = derive_seed(cfg.seed, kind.name(), &[run as u64, 1]);
            let mut search: Box<dyn SearchStrategy> = match cfg.search {
                SearchKind::Random => Box::new(RandomSearch::new(space.clone(), head, search_seed)),
                SearchKind::Tpe => Box::new(TpeSearch::new(space.clone(), head, search_seed)),
            };
            tune_hyperparameters(ds, &setup, cfg.trials, search.as_mut(), kind.name(), run)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TunedSets {
        config_hash: cfg.hash(),
        outcomes,
    })
}

type JobOutput = Vec<std::result::Result<DayForecast, Gap>>;

enum Job {
    Naive(usize),
    Lear {
        window: usize,
        block: Vec<usize>,
    },
    Neural {
        kind: ModelKind,
        run: usize,
        block: Vec<usize>,
    },
}

fn gaps_for(
    model: &str,
    run: usize,
    days: &[usize],
    dates: &[NaiveDate],
    reason: &str,
) -> JobOutput {
    days.iter()
        .map(|&d| {
            Err(Gap {
                model: model.to_string(),
                run,
                day: dates[d],
                reason: reason.to_string(),
            })
        })
        .collect()
}

fn forecast(model: &str, run: usize, day: NaiveDate, hours: Vec<DistSpec<f64>>) -> DayForecast {
    DayForecast {
        day,
        model: model.to_string(),
        run,
        hours,
    }
}

fn run_job(
    job: &Job,
    cfg: &StudyConfig,
    view: &(dyn MarketView + Sync),
    tuned: &TunedSets,
    dates: &[NaiveDate],
) -> JobOutput {
    match job {
        Job::Naive(t) => {
            let t = *t;
            let name = ModelKind::Naive.name();
            let out = (|| -> Result<Vec<DistSpec<f64>>> {
                let point = naive_forecast(view, t)?;
                let days = window_days(t, cfg.window)?;
                let residuals = naive_residuals(view, &days)?;
                let seed = derive_seed(cfg.seed, name, &[t as u64]);
                Ok(bootstrap_distributions(
                    &point,
                    &residuals,
                    cfg.bootstrap_samples,
                    seed,
                )?)
            })();
            vec![out
                .map(|h| forecast(name, 0, dates[t], h))
                .map_err(|e| Gap {
                    model: name.into(),
                    run: 0,
                    day: dates[t],
                    reason: e.to_string(),
                })]
        }
        Job::Lear { window, block } => {
            let name = lear_name(*window);
            let t0 = block[0];
            let fit = match LearFit::fit(view, &(t0 - window..t0).collect::<Vec<_>>()) {
                Ok(f) => f,
                Err(e) => return gaps_for(&name, 0, block, dates, &e.to_string()),
            };
            block
                .iter()
                .map(|&t| match fit.predict(view, t) {
                    Ok(p) => Ok(forecast(
                        &name,
                        0,
                        dates[t],
                        p.iter().map(|&v| DistSpec::Point { value: v }).collect(),
                    )),
                    Err(e) => Err(Gap {
                        model: name.clone(),
                        run: 0,
                        day: dates[t],
                        reason: e.to_string(),
                    }),
                })
                .collect()
        }
        Job::Neural { kind, run, block } => {
            let name = kind.name();
            let head = kind.head().expect("neural model");
            let t0 = block[0];
            let h = match tuned.get(name, *run) {
                Ok(h) => h,
                Err(e) => return gaps_for(name, *run, block, dates, &e.to_string()),
            };
            let days = match window_days(t0, cfg.window) {
                Ok(d) => d,
                Err(e) => return gaps_for(name, *run, block, dates, &e.to_string()),
            };
            let seed = derive_seed(cfg.seed, name, &[*run as u64, t0 as u64]);
            let model = match fit_window(view, &days, h, head, &cfg.train, seed) {
                Ok(m) => m,
                Err((e, _)) => {
                    log::warn!("{name} run {run} day {t0}: {e}");
                    return gaps_for(name, *run, block, dates, &e.to_string());
                }
            };
            match model.forecast_days(view, block) {
                Ok(fs) => block
                    .iter()
                    .zip(fs)
                    .map(|(&t, hours)| Ok(forecast(name, *run, dates[t], hours)))
                    .collect(),
                Err(e) => gaps_for(name, *run, block, dates, &e.to_string()),
            }
        }
    }
}

fn blocks(tl: &Timeline, interval: usize) -> Vec<Vec<usize>> {
    tl.test_days()
        .step_by(interval)
        .map(|s| (s..(s + interval).min(tl.test_end)).collect())
        .collect()
}

fn record(store: &mut ForecastStore, out: JobOutput) -> Result<()> {
    for r in out {
        match r {
            Ok(f) => store.insert(f)?,
            Err(g) => store.insert_gap(g)?,
        }
    }
    Ok(())
}

/// Member forecasts of one day, or the first missing member.
fn members<'s>(
    store: &'s ForecastStore,
    series: &[(String, usize)],
    day: NaiveDate,
) -> std::result::Result<Vec<&'s [DistSpec<f64>]>, String> {
    series
        .iter()
        .map(|(m, r)| {
            store
                .get(m, *r, day)
                .ok_or_else(|| format!("member {m} run {r} missing"))
        })
        .collect()
}

fn point_values(f: &[DistSpec<f64>]) -> Result<[f64; HOURS]> {
    let mut out = [0.0; HOURS];
    for (o, d) in out.iter_mut().zip(f) {
        *o = d.median()?;
    }
    Ok(out)
}

/// Day-by-day combination of member series into one derived series.
fn derive_series(
    store: &ForecastStore,
    name: &str,
    series: &[(String, usize)],
    days: std::ops::Range<usize>,
    dates: &[NaiveDate],
    combine: impl Fn(&[&[DistSpec<f64>]]) -> Result<Vec<DistSpec<f64>>> + Sync,
) -> JobOutput {
    days.into_par_iter()
        .map(|t| {
            let day = dates[t];
            let gap = |reason: String| Gap {
                model: name.to_string(),
                run: 0,
                day,
                reason,
            };
            let m = members(store, series, day).map_err(gap)?;
            combine(&m)
                .map(|hours| forecast(name, 0, day, hours))
                .map_err(|e| gap(e.to_string()))
        })
        .collect()
}

fn point_mean(m: &[&[DistSpec<f64>]]) -> Result<Vec<DistSpec<f64>>> {
    let points = m
        .iter()
        .map(|f| point_values(f))
        .collect::<Result<Vec<_>>>()?;
    Ok(ensemble_mean(&points)
        .iter()
        .map(|&v| DistSpec::Point { value: v })
        .collect())
}

/// QRA (or QRM when `committee`) over the trailing `qr_window` days.
#[allow(clippy::too_many_arguments)]
fn qr_series(
    store: &ForecastStore,
    view: &(dyn MarketView + Sync),
    name: &str,
    series: &[(String, usize)],
    committee: bool,
    tl: &Timeline,
    qr_window: usize,
    dates: &[NaiveDate],
) -> JobOutput {
    tl.eval_days()
        .into_par_iter()
        .map(|t| {
            let day = dates[t];
            let gap = |reason: String| Gap {
                model: name.to_string(),
                run: 0,
                day,
                reason,
            };
            let k = series.len();
            let hist: Vec<usize> = (t - qr_window..t).collect();
            let mut xs = vec![Matrix::zeros(qr_window, k); HOURS];
            for (i, &d) in hist.iter().enumerate() {
                let m = members(store, series, dates[d])
                    .map_err(|e| gap(format!("calibration day {}: {e}", dates[d])))?;
                for (j, f) in m.iter().enumerate() {
                    let p = point_values(f).map_err(|e| gap(e.to_string()))?;
                    for h in 0..HOURS {
                        xs[h][(i, j)] = p[h];
                    }
                }
            }
            let today = members(store, series, day).map_err(gap)?;
            let today: Vec<[f64; HOURS]> = today
                .iter()
                .map(|f| point_values(f))
                .collect::<Result<_>>()
                .map_err(|e| gap(e.to_string()))?;
            let mut hours = Vec::with_capacity(HOURS);
            for (h, x) in xs.into_iter().enumerate() {
                let y: Vec<f64> = hist.iter().map(|&d| view.prices(d)[h]).collect();
                let row: Vec<f64> = today.iter().map(|p| p[h]).collect();
                let fit = if committee {
                    let mean = row.iter().sum::<f64>() / k as f64;
                    qra_forecast(&committee_column(&x), &y, &[mean])
                } else {
                    qra_forecast(&x, &y, &row)
                };
                let fit = fit.map_err(|e| gap(format!("hour {h}: {e}")))?;
                if fit.jittered {
                    log::debug!("{name} {day} hour {h}: rank-deficient regressors");
                }
                hours.push(fit.dist);
            }
            Ok(forecast(name, 0, day, hours))
        })
        .collect()
}

/// Runs every model of the roster over the test period.
pub fn run_rolling_study(
    cfg: &StudyConfig,
    ds: &MarketDataset,
    tuned: &TunedSets,
) -> Result<ForecastStore> {
    let tl = cfg.timeline(ds)?;
    let view: &(dyn MarketView + Sync) = ds;
    let dates = &ds.days;
    let mut jobs = Vec::new();
    if cfg.has(ModelKind::Naive) {
        jobs.extend(tl.test_days().map(Job::Naive));
    }
    for block in blocks(&tl, cfg.recalibration_interval) {
        if cfg.has(ModelKind::Lear) {
            jobs.extend(cfg.lear_windows.iter().map(|&window| Job::Lear {
                window,
                block: block.clone(),
            }));
        }
        for kind in cfg.neural_models() {
            jobs.extend((1..=cfg.runs).map(|run| Job::Neural {
                kind,
                run,
                block: block.clone(),
            }));
        }
    }
    log::info!(
        "study: {} base jobs over {} test days",
        jobs.len(),
        tl.test_end - tl.test_start
    );
    let outputs: Vec<JobOutput> = jobs
        .par_iter()
        .map(|j| run_job(j, cfg, view, tuned, dates))
        .collect();
    let mut store = ForecastStore::new();
    for out in outputs {
        record(&mut store, out)?;
    }

    let runs = |kind: ModelKind| -> Vec<(String, usize)> {
        (1..=cfg.runs)
            .map(|r| (kind.name().to_string(), r))
            .collect()
    };
    if cfg.has(ModelKind::Lear) {
        let windows: Vec<(String, usize)> = cfg
            .lear_windows
            .iter()
            .map(|&w| (lear_name(w), 0))
            .collect();
        let ens = derive_series(
            &store,
            LEAR_ENS,
            &windows,
            tl.test_days(),
            dates,
            point_mean,
        );
        record(&mut store, ens)?;
        for (name, committee) in [(LEAR_QRA, false), (LEAR_QRM, true)] {
            let out = qr_series(
                &store,
                view,
                name,
                &windows,
                committee,
                &tl,
                cfg.qr_window,
                dates,
            );
            record(&mut store, out)?;
        }
    }
    for kind in cfg.neural_models() {
        let members = runs(kind);
        if kind == ModelKind::NnPoint {
            let ens = derive_series(&store, NN_ENS, &members, tl.test_days(), dates, point_mean);
            record(&mut store, ens)?;
            for (name, committee) in [(NN_QRA, false), (NN_QRM, true)] {
                let out = qr_series(
                    &store,
                    view,
                    name,
                    &members,
                    committee,
                    &tl,
                    cfg.qr_window,
                    dates,
                );
                record(&mut store, out)?;
            }
        } else {
            let p = derive_series(
                &store,
                &p_ens_name(kind),
                &members,
                tl.test_days(),
                dates,
                |m| {
                    (0..HOURS)
                        .map(|h| Ok(DistSpec::mixture(m.iter().map(|f| f[h].clone()).collect())?))
                        .collect()
                },
            );
            let q = derive_series(
                &store,
                &q_ens_name(kind),
                &members,
                tl.test_days(),
                dates,
                |m| {
                    (0..HOURS)
                        .map(|h| {
                            let hour: Vec<DistSpec<f64>> = m.iter().map(|f| f[h].clone()).collect();
                            Ok(quantile_average(&hour, QuantileStat::Mean)?)
                        })
                        .collect()
                },
            );
            record(&mut store, p)?;
            record(&mut store, q)?;
        }
    }
    if store.n_gaps() > 0 {
        log::warn!("study finished with {} gaps", store.n_gaps());
    }
    Ok(store)
}

/// Loads tuned sets saved for this exact config, or tunes and saves them.
pub fn load_or_tune(cfg: &StudyConfig, ds: &MarketDataset, dir: &Path) -> Result<TunedSets> {
    let tl = cfg.timeline(ds)?;
    let path = dir.join(HYPERPARAMS_FILE);
    if path.exists() {
        let sets = TunedSets::load(&path)?;
        if sets.config_hash == cfg.hash() {
            log::info!("reusing tuned hyperparameters from {}", path.display());
            return Ok(sets);
        }
        log::warn!("{} was tuned for another config; retuning", path.display());
    }
    let sets = tune_all(cfg, ds, &tl)?;
    std::fs::create_dir_all(dir).map_err(super::io_err(dir))?;
    sets.save(&path)?;
    Ok(sets)
}

/// Tuning, the rolling study and evaluation, with every artifact written
/// below `cfg.output_dir`.
pub fn run_pipeline(cfg: &StudyConfig) -> Result<(ForecastStore, StudyReport)> {
    let work = || -> Result<(ForecastStore, StudyReport)> {
        let ds = cfg.data.load()?;
        let tl = cfg.timeline(&ds)?;
        let dir = &cfg.output_dir;
        let tuned = load_or_tune(cfg, &ds, dir)?;
        let store = run_rolling_study(cfg, &ds, &tuned)?;
        store.save(&dir.join(STORE_DIR), &cfg.hash(), cfg.seed)?;
        let report = evaluate_study(&store, &ds, &tl)?;
        write_report(&report, &dir.join(REPORT_DIR))?;
        Ok((store, report))
    };
    with_threads(cfg.threads, work)
}

/// Runs `f` on a pool of `threads` workers (all cores when `None`).
pub fn with_threads<R: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> Result<R> + Send,
) -> Result<R> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?
            .install(f),
    }
}
