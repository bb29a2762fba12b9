//! Command-line front end for the benchmark harness: MSE, coverage, and
//! timing tables as CSV on stdout (and optionally a file), plus single
//! fits on CSV data.

use std::error::Error;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mross::bench::{
    coverage_csv, fit_csv, mse_csv, parse_config, run_coverage, run_mse, run_timing,
    timing_csv, ExperimentConfig, FitSettings,
};

#[derive(Parser)]
#[command(
    name = "mross",
    version,
    about = "Streaming subsampled binary classifiers: benchmarks and fits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// Small-scale defaults suitable for a workstation run.
    Desk,
    /// Full-scale protocol; slow.
    Paper,
}

#[derive(Args)]
struct CommonOpts {
    /// Flat `key = value` config file layered over the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path; overrides the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread count; overrides the config file.
    #[arg(long)]
    workers: Option<usize>,
    /// Base defaults the config file overrides.
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
}

#[derive(Subcommand)]
enum Command {
    /// Mean-squared-error table across methods and subsample budgets.
    Mse(CommonOpts),
    /// Confidence-interval coverage and length table.
    Coverage {
        #[command(flatten)]
        common: CommonOpts,
        /// Confidence level for the intervals.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Coordinate indices to track, comma separated.
        #[arg(long, default_value = "0,1", value_delimiter = ',')]
        coords: Vec<usize>,
    },
    /// Wall-clock table per end-to-end fit.
    Timing(CommonOpts),
    /// One subsampled fit on a CSV file; prints per-coordinate estimates
    /// and intervals.
    Fit {
        #[command(flatten)]
        common: CommonOpts,
        /// CSV file with one label column and numeric feature columns.
        data: PathBuf,
        /// Which column holds the +/-1 label.
        #[arg(long, default_value_t = 0)]
        label_column: usize,
        /// Do not prepend a constant-1 intercept feature.
        #[arg(long)]
        no_intercept: bool,
        /// Confidence level for the intervals.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
}

fn build_config(common: &CommonOpts) -> Result<ExperimentConfig, Box<dyn Error>> {
    let base = match common.profile {
        Profile::Desk => ExperimentConfig::desk(),
        Profile::Paper => ExperimentConfig::paper(),
    };
    let mut cfg = match &common.config {
        Some(path) => parse_config(&fs::read_to_string(path)?, base)?,
        None => base,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(workers) = common.workers {
        cfg.workers = workers;
    }
    Ok(cfg)
}

fn run() -> Result<(), Box<dyn Error>> {
    match Cli::parse().command {
        Command::Mse(common) => {
            let cfg = build_config(&common)?;
            let rows = run_mse(&cfg)?;
            print!("{}", mse_csv(&rows));
        }
        Command::Coverage {
            common,
            level,
            coords,
        } => {
            let cfg = build_config(&common)?;
            let rows = run_coverage(&cfg, level, &coords)?;
            print!("{}", coverage_csv(&rows));
        }
        Command::Timing(common) => {
            let cfg = build_config(&common)?;
            let rows = run_timing(&cfg)?;
            print!("{}", timing_csv(&rows));
        }
        Command::Fit {
            common,
            data,
            label_column,
            no_intercept,
            level,
        } => {
            let cfg = build_config(&common)?;
            let mut settings = FitSettings::from_config(&cfg);
            settings.label_column = label_column;
            settings.add_intercept = !no_intercept;
            settings.level = level;
            let est = fit_csv(&data, &settings)?;
            let mut text = String::from("coord,estimate,lower,upper\n");
            for (j, (lo, hi)) in est.intervals.iter().enumerate() {
                text.push_str(&format!("{j},{},{lo},{hi}\n", est.theta[j]));
            }
            print!("{text}");
            if !est.report.converged {
                eprintln!(
                    "warning: solver stopped after {} iterations with score norm {:.3e}",
                    est.report.iterations, est.report.final_score_norm
                );
            }
            if let Some(out) = &cfg.out {
                fs::write(out, text)?;
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
