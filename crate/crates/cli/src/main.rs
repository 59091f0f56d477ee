mod commands;
mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qerf::Error;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "qerf", version, about = "Quantile exposure-response functions by GPS caliper matching")]
struct Cli {
    /// TOML file with default settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "QERF_WORKERS")]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from one of the simulation scenarios.
    Simulate(commands::SimulateArgs),
    /// Fit the GPS, tune and run the matching, and report balance. Outcomes
    /// are not read.
    Design(commands::DesignArgs),
    /// Estimate quantile curves and effects from a design directory.
    Analyze(commands::AnalyzeArgs),
    /// Run the simulation benchmark.
    Bench(commands::BenchArgs),
    /// Bootstrap bands for the smoothed curves of a design directory.
    Bands(commands::BandsArgs),
}

/// Column mapping and trimming shared by `design` and `analyze`.
#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Input CSV file.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    exposure_col: Option<String>,
    #[arg(long)]
    outcome_col: Option<String>,
    #[arg(long, value_delimiter = ',')]
    covariate_cols: Option<Vec<String>>,
    #[arg(long)]
    weight_col: Option<String>,
    /// Exposure quantiles kept before matching, e.g. `0.05,0.95`.
    #[arg(long, value_parser = parse_trim)]
    trim: Option<(f64, f64)>,
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let d = &mut cfg.data;
        d.input = self.input.clone();
        d.exposure_col = self.exposure_col.clone();
        d.outcome_col = self.outcome_col.clone();
        d.covariate_cols = self.covariate_cols.clone();
        d.weight_col = self.weight_col.clone();
        d.trim = self.trim;
    }
}

fn parse_trim(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected two quantiles, e.g. 0.05,0.95")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(lo)?, num(hi)?))
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveEstimator {
    Smoothed,
    Empirical,
}

/// Files written by the current command, removed again if it fails.
#[derive(Default)]
pub struct Outputs {
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn create(&mut self, path: impl AsRef<Path>) -> qerf::Result<BufWriter<File>> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let f = File::create(path)?;
        self.written.push(path.to_path_buf());
        Ok(BufWriter::new(f))
    }

    pub fn write(&mut self, path: impl AsRef<Path>, contents: &str) -> qerf::Result<()> {
        use std::io::Write;
        let mut f = self.create(path)?;
        f.write_all(contents.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    fn discard(&mut self) {
        for p in self.written.drain(..) {
            let _ = std::fs::remove_file(&p);
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ReplicateFailures { .. } | Error::TooManyDroppedReps { .. } => 4,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn run(cli: Cli, out: &mut Outputs) -> qerf::Result<()> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let flags = RunConfig { seed: cli.seed, workers: cli.workers, ..Default::default() };
    let base = file.overlay(flags);
    if let Some(k) = base.workers {
        if k == 0 {
            return Err(Error::InvalidArgument("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(&base, &a, out),
        Command::Design(a) => commands::design(base, &a, out),
        Command::Analyze(a) => commands::analyze(base, &a, out),
        Command::Bench(a) => commands::bench(&base, &a, out),
        Command::Bands(a) => commands::bands(base, &a, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut out = Outputs::default();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            out.discard();
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
