//! `countlss` — demand forecasting pipeline driver.
//!
//! Exit codes: 0 success, 2 input/format error, 3 missing artifact,
//! 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use countlss::error::Error;
use countlss::pipeline::{
    run_cluster, run_diagnose, run_evaluate, run_fit, run_forecast, PipelineConfig,
};

#[derive(Parser)]
#[command(name = "countlss", about = "Count-distribution regression forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// flat key=value configuration file
    #[arg(long)]
    config: PathBuf,
    /// override the configured RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// override the worker count (0 = all cores)
    #[arg(long)]
    workers: Option<usize>,
    /// override the configured family list (comma-separated)
    #[arg(long)]
    families: Option<String>,
    /// override the holdout length in days
    #[arg(long)]
    holdout: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the per-series dispersion and zero-fit tables
    Diagnose(Common),
    /// Assign items to clusters and write clusters.csv
    Cluster(Common),
    /// Fit every (cluster, family) model
    Fit {
        #[command(flatten)]
        common: Common,
        /// skip fits whose output JSON already exists
        #[arg(long)]
        resume: bool,
    },
    /// Score holdout forecasts and write the report tables
    Evaluate(Common),
    /// Emit HQC-selected quantile forecasts for a target-day range
    Forecast {
        #[command(flatten)]
        common: Common,
        /// first target day (index into the training window)
        #[arg(long)]
        from_day: usize,
        /// one past the last target day
        #[arg(long)]
        to_day: usize,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = PipelineConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = common.workers {
        cfg.workers = workers;
    }
    if let Some(families) = &common.families {
        cfg.set("families", families)?;
    }
    if let Some(holdout) = common.holdout {
        cfg.holdout_days = holdout;
    }
    Ok(cfg)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Format(_) | Error::Range(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
        Error::MissingArtifact(_) | Error::MissingKeys(_) => 3,
        _ => 4,
    }
}

fn run(command: &Command) -> Result<u8, Error> {
    match command {
        Command::Diagnose(common) => {
            let summary = run_diagnose(&load_config(common)?)?;
            println!(
                "diagnostics: {} series, {:.1}% with IOD > 1",
                summary.n_series,
                100.0 * summary.share_overdispersed
            );
            println!("wrote {}", summary.iod_csv.display());
            println!("wrote {}", summary.zerofit_csv.display());
            Ok(0)
        }
        Command::Cluster(common) => {
            let path = run_cluster(&load_config(common)?)?;
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::Fit { common, resume } => {
            let summary = run_fit(&load_config(common)?, *resume)?;
            println!(
                "fits: {} ok, {} skipped, {} failed",
                summary.n_ok, summary.n_skipped, summary.n_failed
            );
            Ok(if summary.n_failed > 0 { 4 } else { 0 })
        }
        Command::Evaluate(common) => {
            let out = run_evaluate(&load_config(common)?)?;
            for (source, avg) in &out.report.avg_loss {
                let imp = out
                    .report
                    .improvement_pct
                    .get(source)
                    .map_or(String::new(), |v| format!("  improvement {v:+.2}%"));
                println!("{source}: avg pinball {avg:.6}{imp}");
            }
            println!("wrote {}", out.report_csv.display());
            println!("wrote {}", out.per_quantile_csv.display());
            Ok(0)
        }
        Command::Forecast { common, from_day, to_day } => {
            let path = run_forecast(&load_config(common)?, *from_day, *to_day)?;
            println!("wrote {}", path.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
