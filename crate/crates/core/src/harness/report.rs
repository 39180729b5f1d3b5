//! Scores a finished study on the evaluation slice and writes the CSV report.

use std::path::Path;

use chrono::NaiveDate;

use crate::distributions::DistSpec;
use crate::evaluation::{
    crps_matrix, interval_hits, kupiec_test, point_scores, DmMatrix, ScoreRow, ScoreTable,
    KUPIEC_ALPHA,
};
use crate::market_data::{MarketDataset, HOURS};
use crate::matrix::Matrix;

use super::config::Timeline;
use super::store::{ForecastStore, Gap};
use super::{io_err, HarnessError, Result};

pub const SCORES_FILE: &str = "scores.csv";
pub const DM_FILE: &str = "dm_crps.csv";
pub const GAPS_REPORT_FILE: &str = "gaps.csv";
pub const QUANTILES_FILE: &str = "quantiles.csv";

/// Probability levels of the plotting quantiles: the median and the 50% and
/// 90% central intervals.
pub const PLOT_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Plot-ready quantiles of one series for one delivery hour.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileRow {
    pub model: String,
    pub day: NaiveDate,
    pub hour: usize,
    pub price: f64,
    pub quantiles: [f64; PLOT_LEVELS.len()],
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyReport {
    pub scores: ScoreTable,
    /// One-sided DM p-values on CRPS among the probabilistic series.
    pub dm: DmMatrix,
    /// Days every scored series shares.
    pub days: Vec<NaiveDate>,
    /// Series without any forecast on the evaluation slice.
    pub dropped: Vec<String>,
    pub gaps: Vec<Gap>,
    /// Plotting quantiles of the single-model probabilistic series.
    pub quantiles: Vec<QuantileRow>,
}

/// Row label of a store series: the model name, with `#run` for runs.
pub fn series_label(model: &str, run: usize) -> String {
    if run == 0 {
        model.to_string()
    } else {
        format!("{model}#{run}")
    }
}

fn is_point(f: &[DistSpec<f64>]) -> bool {
    f.iter().any(|d| matches!(d, DistSpec::Point { .. }))
}

/// Per-(day, hour) CRPS of one series on `days`.
pub fn series_crps(
    store: &ForecastStore,
    ds: &MarketDataset,
    model: &str,
    run: usize,
    days: &[usize],
) -> Result<Matrix<f64>> {
    let fs: Vec<&[DistSpec<f64>]> = days
        .iter()
        .map(|&d| {
            store.get(model, run, ds.days[d]).ok_or_else(|| {
                HarnessError::Config(format!("{model} has no forecast for {}", ds.days[d]))
            })
        })
        .collect::<Result<_>>()?;
    Ok(crps_matrix(
        fs.iter().zip(days).map(|(f, &d)| (*f, &ds.prices[d][..])),
    )?)
}

/// Scores every series of the store on the days of the evaluation slice
/// that all of them cover.
pub fn evaluate_study(
    store: &ForecastStore,
    ds: &MarketDataset,
    tl: &Timeline,
) -> Result<StudyReport> {
    let eval: Vec<usize> = tl.eval_days().collect();
    let mut series = Vec::new();
    let mut dropped = Vec::new();
    for (m, r) in store.series() {
        if eval.iter().any(|&d| store.get(&m, r, ds.days[d]).is_some()) {
            series.push((m, r));
        } else {
            log::warn!(
                "{} has no forecasts on the evaluation slice",
                series_label(&m, r)
            );
            dropped.push(series_label(&m, r));
        }
    }
    let days: Vec<usize> = eval
        .iter()
        .copied()
        .filter(|&d| {
            series
                .iter()
                .all(|(m, r)| store.get(m, *r, ds.days[d]).is_some())
        })
        .collect();
    if days.len() < eval.len() {
        log::warn!(
            "gaps: scoring on {} of {} evaluation days",
            days.len(),
            eval.len()
        );
    }
    if days.is_empty() {
        return Err(HarnessError::Config(
            "no evaluation day is covered by every series".into(),
        ));
    }

    let mut rows = Vec::with_capacity(series.len());
    let mut prob_names = Vec::new();
    let mut prob_losses = Vec::new();
    let mut quantiles = Vec::new();
    for (m, r) in &series {
        let fs: Vec<&[DistSpec<f64>]> = days
            .iter()
            .map(|&d| store.get(m, *r, ds.days[d]).expect("common day"))
            .collect();
        let pairs = || fs.iter().zip(&days).map(|(f, &d)| (*f, &ds.prices[d][..]));
        let ps = point_scores(pairs())?;
        let label = series_label(m, *r);
        let mut row = ScoreRow {
            model: label.clone(),
            days: days.len(),
            mae: ps.mae,
            rmse: ps.rmse,
            crps: None,
            coverage50: None,
            coverage90: None,
            kupiec50: None,
            kupiec90: None,
        };
        if !fs.iter().any(|f| is_point(f)) {
            let losses = crps_matrix(pairs())?;
            row.crps = Some(losses.as_slice().iter().sum::<f64>() / losses.as_slice().len() as f64);
            for (c, cov, kup) in [
                (0.5, &mut row.coverage50, &mut row.kupiec50),
                (0.9, &mut row.coverage90, &mut row.kupiec90),
            ] {
                let (mut hits, mut n, mut passing) = (0, 0, 0);
                for h in 0..HOURS {
                    let (x, k) = interval_hits(
                        fs.iter().zip(&days).map(|(f, &d)| (&f[h], ds.prices[d][h])),
                        c,
                    )?;
                    if kupiec_test(x, k, c, KUPIEC_ALPHA)?.pass {
                        passing += 1;
                    }
                    hits += x;
                    n += k;
                }
                *cov = Some(hits as f64 / n as f64);
                *kup = Some(passing);
            }
            if *r == 0 {
                for (f, &d) in fs.iter().zip(&days) {
                    for (h, dist) in f.iter().enumerate() {
                        let mut q = [0.0; PLOT_LEVELS.len()];
                        for (v, &p) in q.iter_mut().zip(&PLOT_LEVELS) {
                            *v = dist.quantile(p)?;
                        }
                        quantiles.push(QuantileRow {
                            model: label.clone(),
                            day: ds.days[d],
                            hour: h,
                            price: ds.prices[d][h],
                            quantiles: q,
                        });
                    }
                }
            }
            prob_names.push(label);
            prob_losses.push(losses);
        }
        rows.push(row);
    }
    let dm = DmMatrix::from_losses(prob_names, &prob_losses);
    Ok(StudyReport {
        scores: ScoreTable { rows },
        dm,
        days: days.iter().map(|&d| ds.days[d]).collect(),
        dropped,
        gaps: store.gaps().collect(),
        quantiles,
    })
}

/// Writes `scores.csv`, `dm_crps.csv`, `gaps.csv` and `quantiles.csv` into `dir`.
pub fn write_report(report: &StudyReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e: csv::Error| HarnessError::Format {
            path,
            message: e.to_string(),
        }
    };
    let p = dir.join(SCORES_FILE);
    report
        .scores
        .write_csv(std::fs::File::create(&p).map_err(io_err(&p))?)
        .map_err(csv_err(&p))?;
    let p = dir.join(DM_FILE);
    report
        .dm
        .write_csv(std::fs::File::create(&p).map_err(io_err(&p))?)
        .map_err(csv_err(&p))?;
    let p = dir.join(GAPS_REPORT_FILE);
    let mut w = csv::Writer::from_path(&p).map_err(csv_err(&p))?;
    w.write_record(["model", "run", "day", "reason"])
        .map_err(csv_err(&p))?;
    for g in &report.gaps {
        w.write_record([
            g.model.clone(),
            g.run.to_string(),
            g.day.to_string(),
            g.reason.clone(),
        ])
        .map_err(csv_err(&p))?;
    }
    w.flush().map_err(io_err(&p))?;
    let p = dir.join(QUANTILES_FILE);
    let mut w = csv::Writer::from_path(&p).map_err(csv_err(&p))?;
    let mut header = vec![
        "model".to_string(),
        "day".into(),
        "hour".into(),
        "price".into(),
    ];
    header.extend(
        PLOT_LEVELS
            .iter()
            .map(|l| format!("q{:02}", (l * 100.0).round() as u32)),
    );
    w.write_record(&header).map_err(csv_err(&p))?;
    for q in &report.quantiles {
        let mut rec = vec![
            q.model.clone(),
            q.day.to_string(),
            q.hour.to_string(),
            q.price.to_string(),
        ];
        rec.extend(q.quantiles.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err(&p))?;
    }
    w.flush().map_err(io_err(&p))?;
    Ok(())
}
