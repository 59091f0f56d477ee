//! Simulation study: the four data-generating scenarios, the Monte Carlo
//! truth, the stabilized inverse-weighting comparator and the bias/RMSE
//! benchmark.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, LogNormal, Normal, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ObservationalDataset;
use crate::error::{Error, Result};
use crate::gps::{fit_linear_gps, GpsModel, MarginalDensity};
use crate::pipeline::{bandwidth_candidates, evaluation_grid, run_design, DesignChoice};
use crate::quantile::{
    adjust_bandwidth, kernel_quantile, qerf_empirical_curve, qerf_smooth_sample, select_bandwidth, select_bandwidth_ln, CurveKind,
    QuantileCurve, WeightedSample,
};

pub const EXPOSURE_INTERCEPT: f64 = -0.8;
pub const EXPOSURE_COEF: [f64; 6] = [0.1, 0.1, -0.1, 0.2, 0.1, 0.1];
pub const OUTCOME_COEF: [f64; 6] = [2.0, 2.0, 3.0, -1.0, 2.0, 2.0];
pub const CUBIC_COEF: f64 = 0.13 * 0.13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioId {
    A,
    B,
    C,
    D,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 4] = [ScenarioId::A, ScenarioId::B, ScenarioId::C, ScenarioId::D];
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ScenarioId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(ScenarioId::A),
            "B" => Ok(ScenarioId::B),
            "C" => Ok(ScenarioId::C),
            "D" => Ok(ScenarioId::D),
            _ => Err(Error::InvalidArgument(format!("unknown scenario '{s}'"))),
        }
    }
}

/// Noise law, always scaled by `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum NoiseSpec {
    Normal { sd: f64 },
    StudentT { df: f64, scale: f64 },
    LogNormal { mu: f64, sigma2: f64 },
    ChiSquared { df: f64, scale: f64 },
}

impl NoiseSpec {
    fn sampler(&self) -> Result<Noise> {
        let bad = |e: &dyn fmt::Display| Error::InvalidArgument(format!("invalid noise parameters: {e}"));
        let positive = match *self {
            NoiseSpec::Normal { sd } => sd > 0.0,
            NoiseSpec::StudentT { df, scale } | NoiseSpec::ChiSquared { df, scale } => df > 0.0 && scale > 0.0,
            NoiseSpec::LogNormal { mu, sigma2 } => mu.is_finite() && sigma2 > 0.0,
        };
        if !positive {
            return Err(bad(&"scale parameters must be positive"));
        }
        Ok(match *self {
            NoiseSpec::Normal { sd } => Noise::Normal(Normal::new(0.0, sd).map_err(|e| bad(&e))?),
            NoiseSpec::StudentT { df, scale } => Noise::T(StudentT::new(df).map_err(|e| bad(&e))?, scale),
            NoiseSpec::LogNormal { mu, sigma2 } => {
                Noise::LogNormal(LogNormal::new(mu, sigma2.sqrt()).map_err(|e| bad(&e))?)
            }
            NoiseSpec::ChiSquared { df, scale } => Noise::Chi(ChiSquared::new(df).map_err(|e| bad(&e))?, scale),
        })
    }
}

impl FromStr for NoiseSpec {
    type Err = Error;

    /// `normal:SD`, `t:DF[:SCALE]`, `lognormal:MU:SIGMA2`, `chisq:DF[:SCALE]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let num = |i: usize, default: Option<f64>| -> Result<f64> {
            match parts.get(i) {
                Some(p) => p.parse().map_err(|_| Error::InvalidArgument(format!("bad number in noise spec '{s}'"))),
                None => default.ok_or_else(|| Error::InvalidArgument(format!("incomplete noise spec '{s}'"))),
            }
        };
        let spec = match parts[0].to_ascii_lowercase().as_str() {
            "normal" => NoiseSpec::Normal { sd: num(1, None)? },
            "t" => NoiseSpec::StudentT { df: num(1, None)?, scale: num(2, Some(1.0))? },
            "lognormal" => NoiseSpec::LogNormal { mu: num(1, None)?, sigma2: num(2, None)? },
            "chisq" => NoiseSpec::ChiSquared { df: num(1, None)?, scale: num(2, Some(1.0))? },
            _ => return Err(Error::InvalidArgument(format!("unknown noise law in '{s}'"))),
        };
        spec.sampler()?;
        Ok(spec)
    }
}

enum Noise {
    Normal(Normal<f64>),
    T(StudentT<f64>, f64),
    LogNormal(LogNormal<f64>),
    Chi(ChiSquared<f64>, f64),
}

impl Noise {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Noise::Normal(d) => d.sample(rng),
            Noise::T(d, s) => s * d.sample(rng),
            Noise::LogNormal(d) => d.sample(rng),
            Noise::Chi(d, s) => s * d.sample(rng),
        }
    }
}

/// Support of the fifth covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum C5Support {
    /// Uniform on `{-2, -1, 0, 1, 2}`.
    Integers,
    /// Uniform on `{-2, 2}`.
    TwoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: ScenarioId,
    pub alpha: f64,
    pub exposure_noise: NoiseSpec,
    pub outcome_noise: NoiseSpec,
    pub c5: C5Support,
}

impl Scenario {
    pub fn new(id: ScenarioId) -> Self {
        let t2 = NoiseSpec::StudentT { df: 2.0, scale: 1.0 };
        let (alpha, exposure_noise, outcome_noise) = match id {
            ScenarioId::A => (0.0, NoiseSpec::Normal { sd: 5.0 }, NoiseSpec::Normal { sd: 5.0 }),
            ScenarioId::B => (0.0, t2, NoiseSpec::StudentT { df: 3.0, scale: 3.0 }),
            ScenarioId::C => (0.0, t2, NoiseSpec::LogNormal { mu: 2.1, sigma2: 4.5 }),
            ScenarioId::D => (0.15, t2, NoiseSpec::ChiSquared { df: 3.0, scale: 2.0 }),
        };
        Self { id, alpha, exposure_noise, outcome_noise, c5: C5Support::Integers }
    }

    pub fn with_exposure_noise(mut self, n: NoiseSpec) -> Self {
        self.exposure_noise = n;
        self
    }

    pub fn with_outcome_noise(mut self, n: NoiseSpec) -> Self {
        self.outcome_noise = n;
        self
    }

    pub fn with_c5(mut self, c5: C5Support) -> Self {
        self.c5 = c5;
        self
    }
}

/// `W = -0.8 + (0.1, 0.1, -0.1, 0.2, 0.1, 0.1) . C + eps`.
pub fn exposure_of(c: &[f64; 6], eps: f64) -> f64 {
    EXPOSURE_INTERCEPT + dot(&EXPOSURE_COEF, c) + eps
}

/// Outcome at exposure `w`:
/// `-1 - b . C - w (0.1 - 0.1 C1 + 0.1 C4 + 0.1 C5 + 0.1 C3^2) + 0.13^2 w^3 + (1 + alpha w) eps`.
pub fn outcome_of(c: &[f64; 6], w: f64, alpha: f64, eps: f64) -> f64 {
    -1.0 - dot(&OUTCOME_COEF, c) - w * effect_modifier(c) + CUBIC_COEF * w.powi(3) + (1.0 + alpha * w) * eps
}

fn effect_modifier(c: &[f64; 6]) -> f64 {
    0.1 - 0.1 * c[0] + 0.1 * c[3] + 0.1 * c[4] + 0.1 * c[2] * c[2]
}

fn dot(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn draw_covariates<R: Rng + ?Sized>(rng: &mut R, c5: C5Support) -> [f64; 6] {
    let mut c = [0.0; 6];
    for v in c.iter_mut().take(4) {
        *v = StandardNormal.sample(rng);
    }
    c[4] = match c5 {
        C5Support::Integers => rng.random_range(-2..=2) as f64,
        C5Support::TwoPoint => {
            if rng.random_bool(0.5) {
                2.0
            } else {
                -2.0
            }
        }
    };
    c[5] = rng.random_range(-3.0..3.0);
    c
}

/// Draws `n` units with covariates `c1..c6`, exposure and outcome.
pub fn generate_scenario(s: &Scenario, n: usize, seed: u64) -> Result<ObservationalDataset> {
    let ew = s.exposure_noise.sampler()?;
    let ey = s.outcome_noise.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = draw_covariates(&mut rng, s.c5);
        let wi = exposure_of(&c, ew.draw(&mut rng));
        y.push(outcome_of(&c, wi, s.alpha, ey.draw(&mut rng)));
        w.push(wi);
        rows.push(c.to_vec());
    }
    let names = (1..=6).map(|k| format!("c{k}")).collect();
    ObservationalDataset::new(w, rows, Some(y), names)
}

/// Monte Carlo sample of `(C, eps_Y)` used to evaluate the true QERF at any
/// exposure. All levels share one sample, so true curves never cross.
#[derive(Debug, Clone)]
pub struct TruthOracle {
    alpha: f64,
    /// `-1 - b . C`, the effect modifier and the outcome noise per draw.
    base: Vec<(f64, f64, f64)>,
}

impl TruthOracle {
    pub fn new(s: &Scenario, draws: usize, seed: u64) -> Result<Self> {
        if draws == 0 {
            return Err(Error::InvalidArgument("need at least one draw".into()));
        }
        let ey = s.outcome_noise.sampler()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = (0..draws)
            .map(|_| {
                let c = draw_covariates(&mut rng, s.c5);
                (-1.0 - dot(&OUTCOME_COEF, &c), effect_modifier(&c), ey.draw(&mut rng))
            })
            .collect();
        Ok(Self { alpha: s.alpha, base })
    }

    pub fn draws(&self) -> usize {
        self.base.len()
    }

    /// Potential outcomes `Y(w)` of every draw.
    pub fn outcomes(&self, w: f64) -> Vec<f64> {
        let cubic = CUBIC_COEF * w.powi(3);
        let scale = 1.0 + self.alpha * w;
        self.base.iter().map(|&(lin, m, e)| lin - w * m + cubic + scale * e).collect()
    }

    /// Empirical quantiles of `Y(w)`; `taus` in any order.
    pub fn quantiles(&self, w: f64, taus: &[f64]) -> Vec<f64> {
        let mut y = self.outcomes(w);
        let r = y.len();
        taus.iter()
            .map(|&t| {
                let k = ((t * r as f64 * (1.0 - 1e-12)).ceil() as usize).clamp(1, r);
                *y.select_nth_unstable_by(k - 1, f64::total_cmp).1
            })
            .collect()
    }

    /// True curves, one per level, on `grid`.
    pub fn curves(&self, grid: &[f64], taus: &[f64]) -> Result<Vec<QuantileCurve>> {
        let per_w: Vec<Vec<f64>> = grid.par_iter().map(|&w| self.quantiles(w, taus)).collect();
        taus.iter()
            .enumerate()
            .map(|(t, &tau)| {
                let est = per_w.iter().map(|q| q[t]).collect();
                QuantileCurve::new(tau, grid.to_vec(), est, CurveKind::Empirical)
            })
            .collect()
    }
}

/// True QERF by simulation with `draws` Monte Carlo draws.
pub fn true_qerf(s: &Scenario, grid: &[f64], tau: f64, draws: usize, seed: u64) -> Result<QuantileCurve> {
    if draws < 10_000 {
        return Err(Error::InvalidArgument("the truth needs at least 10^4 draws".into()));
    }
    let mut c = TruthOracle::new(s, draws, seed)?.curves(grid, &[tau])?;
    Ok(c.remove(0))
}

/// `ln` of the stabilized weights `f(W_j) / e(W_j, C_j)`.
fn ln_stabilized_weights(ds: &ObservationalDataset, gps: &GpsModel, md: &MarginalDensity) -> Result<Vec<f64>> {
    let means = gps.means(ds)?;
    let out: Vec<f64> = (0..ds.n_units())
        .into_par_iter()
        .map(|j| {
            let w = ds.exposure()[j];
            let marg = crate::gps::evaluate_marginal(md, w);
            marg.ln() - gps.ln_density_at(w, means[j]) + ds.unit_weight()[j].ln()
        })
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::GpsUnderflow);
    }
    Ok(out)
}

/// Stabilized inverse-weighting comparator: Gaussian-kernel quantile fit on
/// the original data with weights `f(W_j) / e(W_j, C_j) * u_j`.
pub fn iptw_qerf(
    ds: &ObservationalDataset,
    gps: &GpsModel,
    md: &MarginalDensity,
    grid: &[f64],
    tau: f64,
    h_tau: f64,
) -> Result<QuantileCurve> {
    let ln_w = ln_stabilized_weights(ds, gps, md)?;
    let est = kernel_quantile(ds.exposure(), ds.outcome()?, &ln_w, grid, tau, h_tau)?;
    QuantileCurve::new(tau, grid.to_vec(), est, CurveKind::Smoothed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    Matching,
    MatchingS,
    Iptw,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Matching, Estimator::MatchingS, Estimator::Iptw];

    pub fn label(&self) -> &'static str {
        match self {
            Estimator::Matching => "Matching",
            Estimator::MatchingS => "Matching-S",
            Estimator::Iptw => "IPTW",
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "matching" => Ok(Estimator::Matching),
            "matching-s" | "matching_s" => Ok(Estimator::MatchingS),
            "iptw" => Ok(Estimator::Iptw),
            _ => Err(Error::InvalidArgument(format!("unknown estimator '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Target {
    Qerf,
    Qee,
}

/// Running sums of errors per grid point across replications. `NaN`
/// estimates are skipped.
#[derive(Debug, Clone, Default)]
pub struct ErrorAccumulator {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: Vec<usize>,
}

impl ErrorAccumulator {
    pub fn new(points: usize) -> Self {
        Self { sum: vec![0.0; points], sum_sq: vec![0.0; points], count: vec![0; points] }
    }

    pub fn add(&mut self, estimate: &[f64], truth: &[f64]) {
        for g in 0..self.sum.len() {
            let e = estimate[g] - truth[g];
            if e.is_finite() {
                self.sum[g] += e;
                self.sum_sq[g] += e * e;
                self.count[g] += 1;
            }
        }
    }

    fn used(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.sum.len()).filter(|&g| self.count[g] > 0)
    }

    /// Grid mean of `|mean error|`.
    pub fn ab(&self) -> f64 {
        let n = self.used().count();
        self.used().map(|g| (self.sum[g] / self.count[g] as f64).abs()).sum::<f64>() / n as f64
    }

    /// Square root of the grid mean of the mean squared error.
    pub fn rmse(&self) -> f64 {
        let n = self.used().count();
        (self.used().map(|g| self.sum_sq[g] / self.count[g] as f64).sum::<f64>() / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub scenarios: Vec<Scenario>,
    pub ns: Vec<usize>,
    pub taus: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    pub grid_size: usize,
    pub truth_draws: usize,
    pub design: DesignChoice,
}

impl BenchmarkConfig {
    pub fn new(scenarios: Vec<Scenario>, ns: Vec<usize>, reps: usize, seed: u64) -> Self {
        Self {
            scenarios,
            ns,
            taus: vec![0.1, 0.5, 0.9],
            reps,
            seed,
            estimators: Estimator::ALL.to_vec(),
            grid_size: 50,
            truth_draws: 100_000,
            design: DesignChoice::default(),
        }
    }
}

/// One cell of the benchmark table; `tau = None` is the average over levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: ScenarioId,
    pub n: usize,
    pub target: Target,
    pub estimator: Estimator,
    pub tau: Option<f64>,
    pub ab: f64,
    pub rmse: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub rows: Vec<MetricRow>,
}

/// Per-replication seed for `(scenario, n, rep)`.
pub fn rep_seed(seed: u64, scenario: ScenarioId, n: usize, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((scenario as u64) << 56) ^ ((n as u64) << 24) ^ rep as u64);
    rng.next_u64()
}

/// Estimated curves of one replication, indexed `[estimator][tau]`.
type RepCurves = Vec<Option<Vec<Vec<f64>>>>;

fn fit_replication(ds: &ObservationalDataset, cfg: &BenchmarkConfig, grid: &[f64]) -> RepCurves {
    let needs_matching = cfg.estimators.iter().any(|e| *e != Estimator::Iptw);
    let matched_fit = needs_matching.then(|| -> Result<_> {
        let design = run_design(ds, &cfg.design)?;
        let matched = design.matched(ds)?;
        let sample = WeightedSample::from_matched(&matched)?;
        let mut empirical = Vec::new();
        for &tau in &cfg.taus {
            empirical.push(qerf_empirical_curve(&matched, grid, tau)?.estimate);
        }
        Ok((sample, empirical, matched.delta()))
    });

    let report = |est: Estimator, r: Result<Vec<Vec<f64>>>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{} failed: {e}", est.label());
            None
        }
    };

    cfg.estimators
        .iter()
        .map(|&est| match est {
            Estimator::Matching => {
                let r = match &matched_fit {
                    Some(Ok((_, emp, _))) => Ok(emp.clone()),
                    Some(Err(e)) => Err(Error::InvalidArgument(e.to_string())),
                    None => unreachable!(),
                };
                report(est, r)
            }
            Estimator::MatchingS => {
                let r = match &matched_fit {
                    Some(Ok((sample, _, _))) => smoothed_from_sample(ds, sample, grid, &cfg.taus),
                    Some(Err(e)) => Err(Error::InvalidArgument(e.to_string())),
                    None => unreachable!(),
                };
                report(est, r)
            }
            Estimator::Iptw => report(est, iptw_curves(ds, grid, &cfg.taus)),
        })
        .collect()
}

fn smoothed_from_sample(
    ds: &ObservationalDataset,
    sample: &WeightedSample,
    grid: &[f64],
    taus: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let (h_grid, win) = bandwidth_candidates(ds)?;
    let h = select_bandwidth(sample, &h_grid, Some(win))?;
    taus.iter()
        .map(|&tau| Ok(qerf_smooth_sample(sample, grid, tau, adjust_bandwidth(h, tau)?)?.estimate))
        .collect()
}

fn iptw_curves(ds: &ObservationalDataset, grid: &[f64], taus: &[f64]) -> Result<Vec<Vec<f64>>> {
    let gps = fit_linear_gps(ds)?;
    let md = crate::gps::fit_marginal_density(ds)?;
    let (h_grid, win) = bandwidth_candidates(ds)?;
    let ln_w = ln_stabilized_weights(ds, &gps, &md)?;
    let h = select_bandwidth_ln(ds.exposure(), ds.outcome()?, &ln_w, &h_grid, Some(win))?;
    taus.iter()
        .map(|&tau| Ok(iptw_qerf(ds, &gps, &md, grid, tau, adjust_bandwidth(h, tau)?.h_tau)?.estimate))
        .collect()
}

fn differences(v: &[f64]) -> Vec<f64> {
    v.windows(2).map(|p| p[1] - p[0]).collect()
}

/// Runs every `(scenario, N)` cell of the benchmark. Replications are
/// independent and aggregated in order, so results do not depend on the
/// number of worker threads.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkResult> {
    if cfg.reps == 0 {
        return Err(Error::InvalidArgument("need at least one replication".into()));
    }
    if cfg.grid_size < 2 || cfg.taus.is_empty() || cfg.estimators.is_empty() {
        return Err(Error::InvalidArgument("empty grid, level or estimator list".into()));
    }
    let mut rows = Vec::new();
    for s in &cfg.scenarios {
        let oracle = TruthOracle::new(s, cfg.truth_draws, cfg.seed ^ 0x7275_7468)?;
        for &n in &cfg.ns {
            let reps: Vec<Result<(Vec<Vec<f64>>, RepCurves)>> = (0..cfg.reps)
                .into_par_iter()
                .map(|r| {
                    let ds = generate_scenario(s, n, rep_seed(cfg.seed, s.id, n, r))?;
                    let grid = evaluation_grid(&ds, cfg.grid_size)?;
                    let truth = oracle.curves(&grid, &cfg.taus)?.into_iter().map(|c| c.estimate).collect();
                    Ok((truth, fit_replication(&ds, cfg, &grid)))
                })
                .collect();
            rows.extend(aggregate(s.id, n, cfg, reps)?);
        }
    }
    Ok(BenchmarkResult { rows })
}

fn aggregate(
    scenario: ScenarioId,
    n: usize,
    cfg: &BenchmarkConfig,
    reps: Vec<Result<(Vec<Vec<f64>>, RepCurves)>>,
) -> Result<Vec<MetricRow>> {
    let g = cfg.grid_size;
    let nt = cfg.taus.len();
    let ne = cfg.estimators.len();
    let mut qerf = vec![vec![ErrorAccumulator::new(g); nt]; ne];
    let mut qee = vec![vec![ErrorAccumulator::new(g - 1); nt]; ne];
    let mut used = vec![0usize; ne];
    for rep in &reps {
        let (truth, curves) = match rep {
            Ok(v) => v,
            Err(e) => {
                log::warn!("replication failed: {e}");
                continue;
            }
        };
        for (e, c) in curves.iter().enumerate() {
            let Some(c) = c else { continue };
            used[e] += 1;
            for t in 0..nt {
                qerf[e][t].add(&c[t], &truth[t]);
                qee[e][t].add(&differences(&c[t]), &differences(&truth[t]));
            }
        }
    }
    for &u in &used {
        let dropped = cfg.reps - u;
        if dropped * 10 > cfg.reps {
            return Err(Error::TooManyDroppedReps { dropped, total: cfg.reps });
        }
    }

    let mut rows = Vec::new();
    for (target, acc) in [(Target::Qerf, &qerf), (Target::Qee, &qee)] {
        for (e, &est) in cfg.estimators.iter().enumerate() {
            let mut sum_ab = 0.0;
            let mut sum_rmse = 0.0;
            for (t, &tau) in cfg.taus.iter().enumerate() {
                let (ab, rmse) = (acc[e][t].ab(), acc[e][t].rmse());
                sum_ab += ab;
                sum_rmse += rmse;
                rows.push(MetricRow { scenario, n, target, estimator: est, tau: Some(tau), ab, rmse, reps: used[e] });
            }
            rows.push(MetricRow {
                scenario,
                n,
                target,
                estimator: est,
                tau: None,
                ab: sum_ab / nt as f64,
                rmse: sum_rmse / nt as f64,
                reps: used[e],
            });
        }
    }
    Ok(rows)
}

impl BenchmarkResult {
    /// The `Average` row for one cell.
    pub fn average(&self, scenario: ScenarioId, n: usize, target: Target, est: Estimator) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.n == n && r.target == target && r.estimator == est && r.tau.is_none())
    }

    /// `scenario,n,target,estimator,tau,ab,rmse,reps`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["scenario", "n", "target", "estimator", "tau", "ab", "rmse", "reps"])?;
        for r in &self.rows {
            wtr.write_record([
                r.scenario.to_string(),
                r.n.to_string(),
                format!("{:?}", r.target).to_uppercase(),
                r.estimator.label().to_string(),
                r.tau.map_or("Average".to_string(), |t| t.to_string()),
                format!("{:.6}", r.ab),
                format!("{:.6}", r.rmse),
                r.reps.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Plain-text tables, one block per `(target, scenario, N)`, cells
    /// `AB (RMSE)`.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let mut blocks: Vec<(Target, ScenarioId, usize)> = Vec::new();
        for r in &self.rows {
            let key = (r.target, r.scenario, r.n);
            if !blocks.contains(&key) {
                blocks.push(key);
            }
        }
        for (target, s, n) in blocks {
            let rows: Vec<&MetricRow> =
                self.rows.iter().filter(|r| r.target == target && r.scenario == s && r.n == n).collect();
            let mut ests: Vec<Estimator> = Vec::new();
            let mut taus: Vec<Option<f64>> = Vec::new();
            for r in &rows {
                if !ests.contains(&r.estimator) {
                    ests.push(r.estimator);
                }
                if !taus.contains(&r.tau) {
                    taus.push(r.tau);
                }
            }
            out.push_str(&format!("{target:?} | Scenario {s} | N = {n}\n").to_uppercase().replace("SCENARIO", "Scenario"));
            out.push_str(&format!("{:<9}", "tau"));
            for e in &ests {
                out.push_str(&format!("{:>20}", e.label()));
            }
            out.push('\n');
            for t in &taus {
                out.push_str(&format!("{:<9}", t.map_or("Average".to_string(), |v| format!("{v}"))));
                for e in &ests {
                    let cell = rows
                        .iter()
                        .find(|r| r.estimator == *e && r.tau == *t)
                        .map_or(String::new(), |r| format!("{:.3} ({:.3})", r.ab, r.rmse));
                    out.push_str(&format!("{cell:>20}"));
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gps::fit_marginal_density_sample;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn noise_free_origin() {
        let c = [0.0; 6];
        let w = exposure_of(&c, 0.0);
        assert_eq!(w, -0.8);
        assert_abs_diff_eq!(outcome_of(&c, w, 0.0, 0.0), -0.928_652_8, epsilon = 1e-9);
        assert_abs_diff_eq!(outcome_of(&c, w, 0.15, 0.0), -0.928_652_8, epsilon = 1e-9);
    }

    #[test]
    fn uniform_covariate_moments() {
        let ds = generate_scenario(&Scenario::new(ScenarioId::A), 100_000, 5).unwrap();
        let c6 = ds.covariate_column(5);
        let mean = c6.iter().sum::<f64>() / c6.len() as f64;
        let var = c6.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c6.len() as f64;
        assert!(mean.abs() <= 0.03, "{mean}");
        assert!((2.9..=3.1).contains(&var), "{var}");
        let c5 = ds.covariate_column(4);
        assert!(c5.iter().all(|v| [-2.0, -1.0, 0.0, 1.0, 2.0].contains(v)));
        assert!(c5.contains(&0.0));
        let two = generate_scenario(&Scenario::new(ScenarioId::A).with_c5(C5Support::TwoPoint), 100, 5).unwrap();
        assert!(two.covariate_column(4).iter().all(|v| v.abs() == 2.0));
    }

    #[test]
    fn chi_squared_noise_is_nonnegative() {
        let s = Scenario::new(ScenarioId::D);
        let noise = s.outcome_noise.sampler().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((0..10_000).all(|_| noise.draw(&mut rng) >= 0.0));
    }

    #[test]
    fn generation_is_reproducible() {
        let s = Scenario::new(ScenarioId::C);
        let a = generate_scenario(&s, 50, 9).unwrap();
        let b = generate_scenario(&s, 50, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_scenario(&s, 50, 10).unwrap();
        assert_ne!(a.exposure(), c.exposure());
        assert_ne!(a.outcome().unwrap(), c.outcome().unwrap());
        for k in 0..6 {
            assert_ne!(a.covariate_column(k), c.covariate_column(k));
        }
    }

    #[test]
    fn truth_median_at_zero_exposure() {
        let t = TruthOracle::new(&Scenario::new(ScenarioId::A), 100_000, 1).unwrap();
        let q = t.quantiles(0.0, &[0.5])[0];
        assert!((q + 1.0).abs() <= 0.05, "{q}");
    }

    #[test]
    fn truth_monotone_in_tau_and_stable_in_draws() {
        let s = Scenario::new(ScenarioId::B);
        let grid = [-5.0, 0.0, 3.0];
        let small = TruthOracle::new(&s, 20_000, 4).unwrap();
        let big = TruthOracle::new(&s, 40_000, 8).unwrap();
        let c = small.curves(&grid, &[0.1, 0.5, 0.9]).unwrap();
        for g in 0..grid.len() {
            assert!(c[0].estimate[g] <= c[1].estimate[g] && c[1].estimate[g] <= c[2].estimate[g]);
        }
        // Binomial quantile standard error: sqrt(tau (1 - tau) / R) / f(q),
        // with f estimated by a difference quotient of the big sample.
        for &w in &grid {
            let y = big.quantiles(w, &[0.45, 0.5, 0.55]);
            let f = 0.1 / (y[2] - y[0]);
            let se = (0.25f64 / 20_000.0).sqrt() / f;
            let a = small.quantiles(w, &[0.5])[0];
            assert!((a - y[1]).abs() <= 3.0 * se * 1.5, "w={w}: {a} vs {}", y[1]);
        }
        assert!(true_qerf(&s, &grid, 0.5, 100, 1).is_err());
    }

    #[test]
    fn noise_spec_parsing() {
        assert_eq!("normal:5".parse::<NoiseSpec>().unwrap(), NoiseSpec::Normal { sd: 5.0 });
        assert_eq!("t:3:3".parse::<NoiseSpec>().unwrap(), NoiseSpec::StudentT { df: 3.0, scale: 3.0 });
        assert_eq!("t:2".parse::<NoiseSpec>().unwrap(), NoiseSpec::StudentT { df: 2.0, scale: 1.0 });
        assert!("lognormal:2.1".parse::<NoiseSpec>().is_err());
        assert!("gamma:1".parse::<NoiseSpec>().is_err());
        assert!("normal:-1".parse::<NoiseSpec>().is_err());
    }

    #[test]
    fn iptw_without_confounding_matches_unweighted() {
        // GPS chosen equal to the marginal density (same Gaussian), so every
        // stabilized weight is one.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 300;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let y: Vec<f64> = w.iter().map(|&x| x + rng.random_range(-1.0..1.0)).collect();
        let c: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let ds = ObservationalDataset::new(w.clone(), c, Some(y.clone()), vec!["c1".into()]).unwrap();
        let gps = GpsModel::new(5.0, vec![0.0], 2.0).unwrap();
        let md = MarginalDensity::new(vec![5.0], vec![1.0], 2.0).unwrap();
        let grid = [2.0, 5.0, 8.0];
        let a = iptw_qerf(&ds, &gps, &md, &grid, 0.3, 0.8).unwrap();
        let b = kernel_quantile(&w, &y, &vec![0.0; n], &grid, 0.3, 0.8).unwrap();
        assert_eq!(a.estimate, b);

        // Scaling all weights leaves the fit unchanged.
        let md2 = fit_marginal_density_sample(&w).unwrap();
        let x = iptw_qerf(&ds, &gps, &md2, &grid, 0.7, 0.8).unwrap();
        let scaled = ds.clone().with_weights(vec![7.5; n]).unwrap();
        let z = iptw_qerf(&scaled, &gps, &md2, &grid, 0.7, 0.8).unwrap();
        assert_eq!(x.estimate, z.estimate);
    }

    #[test]
    fn perfect_estimator_scores_zero() {
        let truth = vec![1.0, 2.0, 4.0];
        let mut acc = ErrorAccumulator::new(3);
        for _ in 0..5 {
            acc.add(&truth, &truth);
        }
        assert_eq!(acc.ab(), 0.0);
        assert_eq!(acc.rmse(), 0.0);
    }

    #[test]
    fn single_rep_ab_equals_rmse_per_point() {
        let mut acc = ErrorAccumulator::new(1);
        acc.add(&[3.0], &[1.5]);
        assert_eq!(acc.ab(), 1.5);
        assert_eq!(acc.rmse(), 1.5);
    }

    #[test]
    fn undefined_points_are_skipped() {
        let mut acc = ErrorAccumulator::new(2);
        acc.add(&[f64::NAN, 1.0], &[0.0, 0.0]);
        acc.add(&[2.0, 3.0], &[0.0, 0.0]);
        assert_eq!(acc.ab(), (2.0 + 2.0) / 2.0);
    }

    #[test]
    fn small_benchmark_layout() {
        let mut cfg = BenchmarkConfig::new(vec![Scenario::new(ScenarioId::A)], vec![300], 2, 1);
        cfg.truth_draws = 10_000;
        cfg.grid_size = 10;
        cfg.estimators = vec![Estimator::MatchingS, Estimator::Iptw];
        let r = run_benchmark(&cfg).unwrap();
        // 2 targets x 2 estimators x (3 levels + average).
        assert_eq!(r.rows.len(), 16);
        assert!(r.rows.iter().all(|row| row.ab >= 0.0 && row.rmse >= 0.0));
        assert!(r.average(ScenarioId::A, 300, Target::Qerf, Estimator::Iptw).is_some());
        assert!(r.average(ScenarioId::A, 300, Target::Qerf, Estimator::Matching).is_none());
        let text = r.render_text();
        assert!(text.contains("Matching-S") && text.contains("Average"));
        let again = run_benchmark(&cfg).unwrap();
        assert_eq!(r, again);
    }

    proptest! {
        #[test]
        fn rmse_dominates_ab(errs in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 1..6)) {
            let mut acc = ErrorAccumulator::new(4);
            for e in &errs {
                acc.add(e, &[0.0; 4]);
            }
            prop_assert!(acc.rmse() + 1e-12 >= acc.ab());
        }
    }
}
