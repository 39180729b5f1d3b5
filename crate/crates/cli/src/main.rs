use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use epf_core::harness::config::{ModelKind, StudyConfig};
use epf_core::harness::report::{evaluate_study, write_report, DM_FILE, SCORES_FILE};
use epf_core::harness::store::ForecastStore;
use epf_core::harness::study::{
    load_or_tune, run_pipeline, run_rolling_study, tune_all, with_threads, HYPERPARAMS_FILE,
    REPORT_DIR, STORE_DIR,
};
use epf_core::market_data::{
    generate_synthetic, load_hourly_csv, save_hourly_csv, SyntheticConfig,
};

/// Probabilistic day-ahead electricity price forecasting studies.
#[derive(Parser)]
#[command(name = "epf", version)]
struct Cli {
    /// Worker threads (overrides the config and EPF_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an hourly market CSV and optionally write it back normalized.
    Ingest {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic market from a TOML spec.
    Synth {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Tune the neural models and save the best sets.
    Tune {
        #[arg(short, long)]
        config: PathBuf,
        /// Tune only this model instead of every neural model in the roster.
        #[arg(long, value_enum)]
        model: Option<TuneModel>,
        /// Trials per run (overrides the config).
        #[arg(long)]
        trials: Option<usize>,
        /// Base seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the rolling study (tuning first when needed) and save the store.
    Study {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Score a saved store and write the CSV report.
    Evaluate {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Print the saved score table and DM p-values.
    Report {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Tune, study and evaluate in one go.
    Run {
        #[arg(short, long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TuneModel {
    Point,
    Normal,
    Jsu,
}

impl From<TuneModel> for ModelKind {
    fn from(m: TuneModel) -> Self {
        match m {
            TuneModel::Point => ModelKind::NnPoint,
            TuneModel::Normal => ModelKind::ProbNormal,
            TuneModel::Jsu => ModelKind::ProbJsu,
        }
    }
}

fn load_config(path: &Path, threads: Option<usize>) -> Result<StudyConfig> {
    let mut cfg = StudyConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(v) = std::env::var("EPF_THREADS") {
        cfg.threads = Some(v.parse().with_context(|| format!("EPF_THREADS={v}"))?);
    }
    if threads.is_some() {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn print_csv(path: &Path) -> Result<()> {
    let mut rdr =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = vec![rdr
        .headers()?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>()];
    for rec in rdr.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(String::len)
                .max()
                .unwrap_or(0)
        })
        .collect();
    for r in &rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v:>w$}"))
            .collect();
        println!("{}", line.join("  "));
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match cli.command {
        Command::Ingest { input, output } => {
            let ds =
                load_hourly_csv(&input).with_context(|| format!("loading {}", input.display()))?;
            ds.validate()?;
            println!(
                "{}: {} days, {} to {}",
                input.display(),
                ds.n_days(),
                ds.days[0],
                ds.days[ds.n_days() - 1]
            );
            if let Some(out) = output {
                save_hourly_csv(&ds, &out)?;
            }
        }
        Command::Synth { config, output } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let market = generate_synthetic(&SyntheticConfig::from_toml(&text)?)?;
            save_hourly_csv(&market.dataset, &output)?;
            log::info!(
                "wrote {} synthetic days to {}",
                market.dataset.n_days(),
                output.display()
            );
        }
        Command::Tune {
            config,
            model,
            trials,
            seed,
        } => {
            let mut cfg = load_config(&config, cli.threads)?;
            if let Some(m) = model {
                cfg.roster = vec![m.into()];
            }
            cfg.trials = trials.unwrap_or(cfg.trials);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let ds = cfg.data.load()?;
            let tl = cfg.timeline(&ds)?;
            let sets = with_threads(cfg.threads, || tune_all(&cfg, &ds, &tl))?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            sets.save(&cfg.output_dir.join(HYPERPARAMS_FILE))?;
            for o in &sets.outcomes {
                println!(
                    "{} run {}: validation score {:.4}",
                    o.model, o.run, o.best_score
                );
            }
        }
        Command::Study { config } => {
            let cfg = load_config(&config, cli.threads)?;
            let ds = cfg.data.load()?;
            let store = with_threads(cfg.threads, || {
                let tuned = load_or_tune(&cfg, &ds, &cfg.output_dir)?;
                run_rolling_study(&cfg, &ds, &tuned)
            })?;
            let m = store.save(&cfg.output_dir.join(STORE_DIR), &cfg.hash(), cfg.seed)?;
            println!("{} forecasts, {} gaps", m.n_forecasts, m.n_gaps);
        }
        Command::Evaluate { config } => {
            let cfg = load_config(&config, cli.threads)?;
            let ds = cfg.data.load()?;
            let tl = cfg.timeline(&ds)?;
            let (store, manifest) = ForecastStore::load(&cfg.output_dir.join(STORE_DIR))?;
            if manifest.config_hash != cfg.hash() {
                bail!("the saved store was produced by a different config");
            }
            let report = with_threads(cfg.threads, || evaluate_study(&store, &ds, &tl))?;
            write_report(&report, &cfg.output_dir.join(REPORT_DIR))?;
            println!(
                "scored {} series on {} days",
                report.scores.rows.len(),
                report.days.len()
            );
        }
        Command::Report { config } => {
            let cfg = load_config(&config, cli.threads)?;
            let dir = cfg.output_dir.join(REPORT_DIR);
            print_csv(&dir.join(SCORES_FILE))?;
            println!();
            print_csv(&dir.join(DM_FILE))?;
        }
        Command::Run { config } => {
            let cfg = load_config(&config, cli.threads)?;
            let (store, report) = run_pipeline(&cfg)?;
            println!(
                "{} forecasts, {} gaps; report in {}",
                store.len(),
                store.n_gaps(),
                cfg.output_dir.join(REPORT_DIR).display()
            );
            print_csv(&cfg.output_dir.join(REPORT_DIR).join(SCORES_FILE))?;
            if !report.dropped.is_empty() {
                println!("not scored: {}", report.dropped.join(", "));
            }
        }
    }
    Ok(())
}
