use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use qerf::dataset::{self, load_csv, trim_exposure, ObservationalDataset};
use qerf::export::{balance_svg, curves_svg, write_balance_csv};
use qerf::inference::{bootstrap_bands, variance_qerf, write_variance_csv, BootstrapBands};
use qerf::matching::{balance_report, balance_report_raw, MatchConfig, MatchedDataset, TuningCell};
use qerf::pipeline::{bandwidth_candidates, evaluation_grid, run_design, PipelineConfig};
use qerf::quantile::{
    adjust_bandwidth, kernel_quantile, qerf_empirical_curve, select_bandwidth, CurveKind, QuantileCurve,
    WeightedSample,
};
use qerf::simbench::{
    generate_scenario, run_benchmark, BenchmarkConfig, BenchmarkResult, C5Support, Estimator, NoiseSpec, Scenario,
    ScenarioId, Target,
};
use qerf::{Error, GpsModel, Result};

use crate::config::RunConfig;
use crate::{CurveEstimator, DataArgs, Outputs};

const MANIFEST: &str = "manifest.json";
const MATCHED: &str = "matched.csv";
const BALANCE_THRESHOLD: f64 = 0.1;

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum C5Arg {
    Integers,
    TwoPoint,
}

/// Noise overrides for the simulation scenarios.
#[derive(Args, Debug, Clone, Default)]
pub struct NoiseArgs {
    /// Exposure noise law, e.g. `normal:5`, `t:2:1`.
    #[arg(long)]
    exposure_noise: Option<NoiseSpec>,
    /// Outcome noise law, e.g. `lognormal:2.1:4.5`, `chisq:3:2`.
    #[arg(long)]
    outcome_noise: Option<NoiseSpec>,
    /// Support of the fifth covariate.
    #[arg(long, value_enum)]
    c5: Option<C5Arg>,
}

impl NoiseArgs {
    fn scenario(&self, id: ScenarioId) -> Scenario {
        let mut s = Scenario::new(id);
        if let Some(n) = self.exposure_noise {
            s = s.with_exposure_noise(n);
        }
        if let Some(n) = self.outcome_noise {
            s = s.with_outcome_noise(n);
        }
        match self.c5 {
            Some(C5Arg::Integers) => s.with_c5(C5Support::Integers),
            Some(C5Arg::TwoPoint) => s.with_c5(C5Support::TwoPoint),
            None => s,
        }
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, default_value = "A")]
    scenario: ScenarioId,
    #[arg(long)]
    n: usize,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    noise: NoiseArgs,
}

pub fn simulate(cfg: &RunConfig, a: &SimulateArgs, out: &mut Outputs) -> Result<()> {
    if a.n == 0 {
        return Err(invalid("--n must be at least 1"));
    }
    let ds = generate_scenario(&a.noise.scenario(a.scenario), a.n, cfg.seed()?)?;
    dataset::write_csv(&ds, out.create(&a.out)?)?;
    log::info!("wrote {} units to {}", a.n, a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct DesignArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Fixed caliper; skips the grid search together with --lambda.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Everything `analyze` needs to rebuild the matched set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub input: PathBuf,
    pub n_units: usize,
    pub exposure_sum: f64,
    pub delta: f64,
    pub lambda: f64,
    pub aac_raw: f64,
    pub aac_matched: f64,
    pub tuning_grid: Option<Vec<TuningCell>>,
    pub gps: GpsModel,
    pub outcome_read: bool,
    pub config: RunConfig,
}

fn load(cfg: &RunConfig) -> Result<ObservationalDataset> {
    let ds = load_csv(cfg.input()?, &cfg.schema()?)?;
    let (lo, hi) = cfg.trim()?;
    if lo > 0.0 || hi < 1.0 {
        let kept = trim_exposure(&ds, lo, hi)?;
        log::info!("trimming kept {} of {} units", kept.n_units(), ds.n_units());
        Ok(kept)
    } else {
        Ok(ds)
    }
}

pub fn design(base: RunConfig, a: &DesignArgs, out: &mut Outputs) -> Result<()> {
    let mut flags = RunConfig::default();
    a.data.apply(&mut flags);
    flags.design.delta = a.delta;
    flags.design.lambda = a.lambda;
    flags.design.deltas = a.deltas.clone();
    flags.design.lambdas = a.lambdas.clone();
    let cfg = base.overlay(flags);

    let schema = cfg.schema()?.outcome_blind();
    let ds = load_csv(cfg.input()?, &schema)?;
    let ds = match cfg.trim()? {
        (lo, hi) if lo > 0.0 || hi < 1.0 => trim_exposure(&ds, lo, hi)?,
        _ => ds,
    };
    let design = run_design(&ds, &cfg.design_choice()?)?;
    let matched = design.matched(&ds)?;
    let raw = balance_report_raw(&ds)?;
    let after = balance_report(&matched)?;
    log::info!(
        "delta = {}, lambda = {}, AAC {:.4} -> {:.4}",
        design.config.delta,
        design.config.lambda,
        raw.aac,
        after.aac
    );
    if after.aac >= BALANCE_THRESHOLD {
        log::warn!("matched AAC {:.4} is above {BALANCE_THRESHOLD}", after.aac);
    }

    matched.write_csv(out.create(a.out.join(MATCHED))?)?;
    let reports = [("raw", &raw), ("matched", &after)];
    write_balance_csv(&reports, out.create(a.out.join("balance.csv"))?)?;
    out.write(a.out.join("balance.svg"), &balance_svg(&reports, BALANCE_THRESHOLD))?;
    let manifest = Manifest {
        input: cfg.input()?.to_path_buf(),
        n_units: ds.n_units(),
        exposure_sum: ds.exposure().iter().sum(),
        delta: design.config.delta,
        lambda: design.config.lambda,
        aac_raw: raw.aac,
        aac_matched: after.aac,
        tuning_grid: design.tuning.map(|t| t.grid),
        gps: design.gps,
        outcome_read: ds.has_outcome(),
        config: cfg,
    };
    out.write(a.out.join(MANIFEST), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Flags shared by `analyze` and `bands`.
#[derive(Args, Debug)]
pub struct StageArgs {
    /// Directory written by `design`.
    #[arg(long)]
    design: PathBuf,
    /// Dataset with outcomes; defaults to the design input.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    outcome_col: Option<String>,
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    #[arg(long)]
    grid_size: Option<usize>,
    /// Bandwidth of the conditional-mean fit; chosen by cross-validation
    /// when absent.
    #[arg(long)]
    h_mean: Option<f64>,
    /// Bootstrap replicates.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl StageArgs {
    fn flags(&self) -> RunConfig {
        let mut f = RunConfig::default();
        f.data.input = self.input.clone();
        f.data.outcome_col = self.outcome_col.clone();
        f.analysis.taus = self.taus.clone();
        f.analysis.grid_size = self.grid_size;
        f.analysis.h_mean = self.h_mean;
        f.bootstrap.replicates = self.replicates;
        f.bootstrap.alpha = self.alpha;
        f
    }
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    stage: StageArgs,
    #[arg(long, value_enum, default_value = "smoothed")]
    estimator: CurveEstimator,
    /// Exposure increment of the reported effects.
    #[arg(long)]
    increment: Option<f64>,
    /// Also write plug-in standard errors of the caliper-window estimator.
    #[arg(long)]
    variance: bool,
    /// Nearest neighbours for the conditional variance.
    #[arg(long)]
    neighbors: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BandsArgs {
    #[command(flatten)]
    stage: StageArgs,
}

/// Configuration resolved against a design manifest. The data section is
/// pinned to the design except for the outcome column and the file path.
fn resolve(base: RunConfig, flags: RunConfig, design_dir: &Path) -> Result<(RunConfig, Manifest)> {
    let text = std::fs::read_to_string(design_dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut cfg = manifest.config.clone().overlay(base).overlay(flags);
    let mut data = manifest.config.data.clone();
    data.outcome_col = cfg.data.outcome_col.take();
    data.input = cfg.data.input.take().or_else(|| Some(manifest.input.clone()));
    cfg.data = data;
    if cfg.data.outcome_col.is_none() {
        return Err(invalid("no outcome column given"));
    }
    Ok((cfg, manifest))
}

fn check_same_units(ds: &ObservationalDataset, m: &Manifest) -> Result<()> {
    let sum: f64 = ds.exposure().iter().sum();
    if ds.n_units() != m.n_units || (sum - m.exposure_sum).abs() > 1e-9 * m.exposure_sum.abs().max(1.0) {
        return Err(Error::InvalidDataset("data do not match the units of the design".into()));
    }
    Ok(())
}

fn matched_set<'a>(ds: &'a ObservationalDataset, m: &Manifest, dir: &Path) -> Result<MatchedDataset<'a>> {
    let f = File::open(dir.join(MATCHED))?;
    MatchedDataset::read_csv(f, ds, m.gps.clone(), MatchConfig::new(m.delta, m.lambda)?)
}

fn choose_h_mean(cfg: &RunConfig, ds: &ObservationalDataset, sample: &WeightedSample) -> Result<f64> {
    if let Some(h) = cfg.analysis.h_mean {
        return Ok(h);
    }
    let (default_grid, window) = bandwidth_candidates(ds)?;
    let grid = cfg.analysis.bandwidths.clone().unwrap_or(default_grid);
    let h = select_bandwidth(sample, &grid, Some(window))?;
    log::info!("cross-validated h_mean = {h:.4}");
    Ok(h)
}

fn tau_tag(tau: f64) -> String {
    format!("tau{tau}")
}

/// Sorted union of the grid and its points shifted down by `inc`, with
/// index maps for both.
fn with_shifted(grid: &[f64], inc: f64) -> (Vec<f64>, Vec<usize>, Vec<Option<usize>>) {
    let lo = grid[0];
    let mut all: Vec<f64> = grid.to_vec();
    all.extend(grid.iter().map(|w| w - inc).filter(|&v| v >= lo - 1e-12 * inc));
    all.sort_by(f64::total_cmp);
    all.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * inc);
    let find = |v: f64| all.iter().position(|&x| (x - v).abs() <= 1e-12 * inc);
    let at: Vec<usize> = grid.iter().map(|&w| find(w).expect("grid point kept")).collect();
    let prev = grid.iter().map(|&w| find(w - inc)).collect();
    (all, at, prev)
}

pub fn analyze(base: RunConfig, a: &AnalyzeArgs, out: &mut Outputs) -> Result<()> {
    let mut flags = a.stage.flags();
    flags.analysis.increment = a.increment;
    flags.analysis.neighbors = a.neighbors;
    let (cfg, manifest) = resolve(base, flags, &a.stage.design)?;
    let taus = cfg.taus()?;
    let inc = cfg.increment()?;
    let b = cfg.replicates();
    if b > 0 && a.estimator == CurveEstimator::Empirical {
        return Err(invalid("bootstrap bands are available for the smoothed estimator only"));
    }

    let ds = load(&cfg)?;
    check_same_units(&ds, &manifest)?;
    let matched = matched_set(&ds, &manifest, &a.stage.design)?;
    let grid = evaluation_grid(&ds, cfg.grid_size()?)?;
    let (points, at, prev) = with_shifted(&grid, inc);
    let omitted = prev.iter().filter(|p| p.is_none()).count();
    if omitted > 0 {
        log::info!("{omitted} grid points lie within {inc} of the grid minimum; their effects are omitted");
    }

    let sample = WeightedSample::from_matched(&matched)?;
    let h_mean = match a.estimator {
        CurveEstimator::Smoothed => Some(choose_h_mean(&cfg, &ds, &sample)?),
        CurveEstimator::Empirical => None,
    };
    let ln_w: Vec<f64> = sample.weight.iter().map(|v| v.ln()).collect();
    let mut full = Vec::with_capacity(taus.len());
    for &tau in &taus {
        let curve = match h_mean {
            Some(h) => {
                let est = kernel_quantile(&sample.w, &sample.y, &ln_w, &points, tau, adjust_bandwidth(h, tau)?.h_tau)?;
                QuantileCurve::new(tau, points.clone(), est, CurveKind::Smoothed)?
            }
            None => qerf_empirical_curve(&matched, &points, tau)?,
        };
        full.push(curve);
    }

    let bands: Option<Vec<BootstrapBands>> = match (b, h_mean) {
        (0, _) | (_, None) => None,
        (b, Some(h)) => {
            let pc = PipelineConfig { matching: matched.config(), h_mean: h, taus: taus.clone(), grid: points.clone() };
            let bands = bootstrap_bands(&ds, &pc, b, cfg.alpha()?, cfg.seed()?)?;
            if bands[0].failed > 0 {
                log::warn!("{} of {b} bootstrap replicates failed", bands[0].failed);
            }
            Some(bands)
        }
    };

    let mut qee_curves = Vec::new();
    let mut qee_rows: Vec<[String; 6]> = Vec::new();
    let fmt = |v: f64| if v.is_finite() { v.to_string() } else { "NA".to_string() };
    for (t, curve) in full.iter().enumerate() {
        let mut q = curve.clone();
        q.grid = grid.clone();
        q.estimate = at.iter().map(|&i| curve.estimate[i]).collect();
        if let Some(bs) = &bands {
            q = q.with_bands(at.iter().map(|&i| bs[t].lower[i]).collect(), at.iter().map(|&i| bs[t].upper[i]).collect())?;
        }
        let tag = tau_tag(curve.tau);
        QuantileCurve::write_csv(std::slice::from_ref(&q), out.create(a.stage.out.join(format!("qerf_{tag}.csv")))?)?;
        let title = format!("Quantile exposure-response, tau = {}", curve.tau);
        out.write(a.stage.out.join(format!("qerf_{tag}.svg")), &curves_svg(std::slice::from_ref(&q), &title, "outcome"))?;

        let (mut ws, mut es, mut lo, mut hi) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (g, (&i, k)) in at.iter().zip(&prev).enumerate() {
            let Some(k) = *k else { continue };
            let e = curve.estimate[i] - curve.estimate[k];
            let band = match &bands {
                Some(bs) => Some(bs[t].difference_band(i, k)?),
                None => None,
            };
            qee_rows.push([
                curve.tau.to_string(),
                grid[g].to_string(),
                (grid[g] - inc).to_string(),
                fmt(e),
                band.map(|b| fmt(b.0)).unwrap_or_default(),
                band.map(|b| fmt(b.1)).unwrap_or_default(),
            ]);
            ws.push(grid[g]);
            es.push(e);
            if let Some((l, u)) = band {
                lo.push(l);
                hi.push(u);
            }
        }
        if ws.len() > 1 {
            let mut c = QuantileCurve::new(curve.tau, ws, es, curve.kind)?;
            if bands.is_some() {
                c = c.with_bands(lo, hi)?;
            }
            qee_curves.push(c);
        }
    }
    let mut wtr = csv::Writer::from_writer(out.create(a.stage.out.join("qee.csv"))?);
    wtr.write_record(["tau", "w", "w_prime", "estimate", "lower", "upper"]).map_err(Error::from)?;
    for r in &qee_rows {
        wtr.write_record(r).map_err(Error::from)?;
    }
    wtr.flush()?;
    if !qee_curves.is_empty() {
        let title = format!("Quantile exposure effect of an increase by {inc}");
        out.write(a.stage.out.join("qee.svg"), &curves_svg(&qee_curves, &title, "effect"))?;
    }

    if a.variance {
        let m = cfg.neighbors()?;
        let mut rows = Vec::new();
        for &tau in &taus {
            for &w in &grid {
                match variance_qerf(&matched, w, tau, m) {
                    Ok(v) => rows.push(v),
                    Err(e) => log::warn!("no standard error at w = {w}, tau = {tau}: {e}"),
                }
            }
        }
        write_variance_csv(&rows, out.create(a.stage.out.join("variance.csv"))?)?;
    }

    let summary = serde_json::json!({
        "estimator": format!("{:?}", a.estimator).to_lowercase(),
        "h_mean": h_mean,
        "taus": taus,
        "increment": inc,
        "grid": grid,
        "bootstrap": bands.as_ref().map(|bs| serde_json::json!({
            "replicates": b,
            "failed": bs[0].failed,
            "alpha": bs[0].alpha,
            "seed": bs[0].seed,
        })),
        "config": cfg,
    });
    out.write(a.stage.out.join("analysis.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

pub fn bands(base: RunConfig, a: &BandsArgs, out: &mut Outputs) -> Result<()> {
    let (cfg, manifest) = resolve(base, a.stage.flags(), &a.stage.design)?;
    let taus = cfg.taus()?;
    let b = cfg.bootstrap.replicates.unwrap_or(200);
    let ds = load(&cfg)?;
    check_same_units(&ds, &manifest)?;
    let matched = matched_set(&ds, &manifest, &a.stage.design)?;
    let grid = evaluation_grid(&ds, cfg.grid_size()?)?;
    let sample = WeightedSample::from_matched(&matched)?;
    let h = choose_h_mean(&cfg, &ds, &sample)?;
    let pc = PipelineConfig { matching: matched.config(), h_mean: h, taus: taus.clone(), grid: grid.clone() };
    let bands = bootstrap_bands(&ds, &pc, b, cfg.alpha()?, cfg.seed()?)?;
    if bands[0].failed > 0 {
        log::warn!("{} of {b} bootstrap replicates failed", bands[0].failed);
    }
    let ln_w: Vec<f64> = sample.weight.iter().map(|v| v.ln()).collect();
    let mut curves = Vec::with_capacity(taus.len());
    for (tau, band) in taus.iter().zip(&bands) {
        let est = kernel_quantile(&sample.w, &sample.y, &ln_w, &grid, *tau, adjust_bandwidth(h, *tau)?.h_tau)?;
        curves.push(band.attach(QuantileCurve::new(*tau, grid.clone(), est, CurveKind::Smoothed)?)?);
    }
    QuantileCurve::write_csv(&curves, out.create(a.stage.out.join("bands.csv"))?)?;
    let title = format!("Smoothed quantile curves with {}% bands", 100.0 * (1.0 - bands[0].alpha));
    out.write(a.stage.out.join("bands.svg"), &curves_svg(&curves, &title, "outcome"))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// `A`..`D`, a comma list, or `all`.
    #[arg(long, default_value = "A")]
    scenario: String,
    #[arg(long, value_delimiter = ',', default_value = "1000")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Subset of `matching,matching-s,iptw`.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<Estimator>>,
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    #[arg(long)]
    grid_size: Option<usize>,
    /// Monte Carlo draws behind the true curves.
    #[arg(long)]
    truth_draws: Option<usize>,
    #[command(flatten)]
    noise: NoiseArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn scenarios(spec: &str) -> Result<Vec<ScenarioId>> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(ScenarioId::ALL.to_vec());
    }
    spec.split(',').map(str::parse).collect()
}

pub fn bench(cfg: &RunConfig, a: &BenchArgs, out: &mut Outputs) -> Result<()> {
    let ids = scenarios(&a.scenario)?;
    if a.n.contains(&0) {
        return Err(invalid("sample sizes must be positive"));
    }
    let mut bc = BenchmarkConfig::new(
        ids.iter().map(|&id| a.noise.scenario(id)).collect(),
        a.n.clone(),
        a.reps,
        cfg.seed()?,
    );
    if let Some(e) = &a.estimators {
        bc.estimators = e.clone();
    }
    if let Some(t) = a.taus.clone().or_else(|| cfg.analysis.taus.clone()) {
        bc.taus = t;
    }
    if let Some(g) = a.grid_size.or(cfg.analysis.grid_size) {
        bc.grid_size = g;
    }
    if let Some(d) = a.truth_draws {
        bc.truth_draws = d;
    }
    bc.design = cfg.design_choice()?;
    let result = run_benchmark(&bc)?;
    result.write_csv(out.create(a.out.join("bench.csv"))?)?;
    for (target, name) in [(Target::Qerf, "bench_qerf.txt"), (Target::Qee, "bench_qee.txt")] {
        let part = BenchmarkResult { rows: result.rows.iter().filter(|r| r.target == target).cloned().collect() };
        out.write(a.out.join(name), &part.render_text())?;
    }
    Ok(())
}
