//! Plug-in asymptotic variance of the caliper-window estimator and weighted
//! bootstrap bands for the smoothed curves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ObservationalDataset;
use crate::error::{Error, Result};
use crate::matching::{match_distance, standardize, MatchedDataset};
use crate::pipeline::{fit_smoothed_curves, PipelineConfig};
use crate::quantile::{qerf_empirical, weighted_quantile, QuantileCurve};
use crate::stats::{norm_pdf, silverman_bandwidth};

/// Densities below this make the plug-in variance meaningless.
pub const DENSITY_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub w: f64,
    pub tau: f64,
    pub estimate: f64,
    pub sigma2: f64,
    /// Standard error of the estimate, `sqrt(sigma2 / (N delta))`.
    pub se: f64,
    pub density_at_q: f64,
    pub m_neighbors: usize,
}

/// `M/(M+1) (own - mean(neighbours))^2` for indicator values.
pub fn mnn_variance(own: bool, neighbors: &[bool]) -> f64 {
    let m = neighbors.len() as f64;
    let mean = neighbors.iter().filter(|&&b| b).count() as f64 / m;
    let d = own as u8 as f64 - mean;
    m / (m + 1.0) * d * d
}

/// Observed units with exposure in `[w - delta, w + delta]`, by index.
fn window_units(matched: &MatchedDataset, w: f64) -> Vec<usize> {
    let delta = matched.delta();
    (0..matched.source().n_units())
        .filter(|&j| (matched.source().exposure()[j] - w).abs() <= delta)
        .collect()
}

/// For each matched unit in the window around `w`, its `m` nearest other
/// window units under the matching metric (ties to the lower index).
pub fn mnn_neighbors(matched: &MatchedDataset, w: f64, m: usize) -> Result<Vec<(usize, Vec<usize>)>> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one neighbour".into()));
    }
    let window = window_units(matched, w);
    if window.len() < m + 1 {
        return Err(Error::InsufficientNeighbors { w, found: window.len(), needed: m + 1 });
    }
    let ds = matched.source();
    let e = standardize(matched.observed_gps());
    let ws = standardize(ds.exposure());
    let lambda = matched.config().lambda;
    let k = matched.k_count();
    Ok(window
        .iter()
        .filter(|&&j| k[j] > 0)
        .map(|&j| {
            let mut d: Vec<(f64, usize)> = window
                .iter()
                .filter(|&&l| l != j)
                .map(|&l| (match_distance(lambda, e[j], e[l], ws[j], ws[l]), l))
                .collect();
            d.select_nth_unstable_by(m - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.truncate(m);
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            (j, d.into_iter().map(|p| p.1).collect())
        })
        .collect())
}

/// Matching-based estimate of the conditional variance of `1(Y <= q)` for
/// every unit; zero outside the window and for unmatched units.
pub fn conditional_variance_mnn(matched: &MatchedDataset, q: f64, w: f64, m: usize) -> Result<Vec<f64>> {
    let y = matched.source().outcome()?;
    let mut out = vec![0.0; matched.source().n_units()];
    for (j, nb) in mnn_neighbors(matched, w, m)? {
        let ind: Vec<bool> = nb.iter().map(|&l| y[l] <= q).collect();
        out[j] = mnn_variance(y[j] <= q, &ind);
    }
    Ok(out)
}

/// In-window `(Y_j, K_j * u_j)` for matched units.
fn window_outcomes(matched: &MatchedDataset, w: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let y = matched.source().outcome()?;
    let a = matched.unit_weights();
    let (ys, ws): (Vec<f64>, Vec<f64>) = window_units(matched, w)
        .into_iter()
        .filter(|&j| a[j] > 0.0)
        .map(|j| (y[j], a[j]))
        .unzip();
    if ys.is_empty() {
        return Err(Error::EmptyWindow { w });
    }
    Ok((ys, ws))
}

/// Silverman bandwidth of the weighted in-window outcomes.
pub fn default_h1(matched: &MatchedDataset, w: f64) -> Result<f64> {
    let (ys, ws) = window_outcomes(matched, w)?;
    silverman_bandwidth(&ys, &ws).ok_or(Error::DegenerateSample)
}

/// `(1/N) sum_j K_j u_j 1_j(w, delta) phi((Y_j - y) / h1) / h1`.
pub fn density_weighted_kde(matched: &MatchedDataset, y: f64, w: f64, h1: f64) -> Result<f64> {
    if !(h1 > 0.0 && h1.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h1}")));
    }
    let (ys, ws) = window_outcomes(matched, w)?;
    let n = matched.source().n_units() as f64;
    Ok(ys.iter().zip(&ws).map(|(&v, &a)| a * norm_pdf((v - y) / h1)).sum::<f64>() / (n * h1))
}

/// Plug-in variance of the caliper-window estimator at `(w, tau)` with `m`
/// matched neighbours and the default outcome bandwidth.
pub fn variance_qerf(matched: &MatchedDataset, w: f64, tau: f64, m: usize) -> Result<VarianceEstimate> {
    let h1 = default_h1(matched, w)?;
    variance_qerf_with_bandwidth(matched, w, tau, m, h1)
}

pub fn variance_qerf_with_bandwidth(
    matched: &MatchedDataset,
    w: f64,
    tau: f64,
    m: usize,
    h1: f64,
) -> Result<VarianceEstimate> {
    let q = qerf_empirical(matched, w, tau)?;
    let density = density_weighted_kde(matched, q, w, h1)?;
    if !(density > DENSITY_FLOOR) {
        return Err(Error::DensityFloorHit { w, tau, density });
    }
    let s2 = conditional_variance_mnn(matched, q, w, m)?;
    let a = matched.unit_weights();
    let n = matched.source().n_units() as f64;
    let delta = matched.delta();
    let num: f64 = s2.iter().zip(&a).map(|(&s, &k)| delta * k * k * s).sum::<f64>() / n;
    let sigma2 = num / (density * density);
    Ok(VarianceEstimate {
        w,
        tau,
        estimate: q,
        sigma2,
        se: (sigma2 / (n * delta)).sqrt(),
        density_at_q: density,
        m_neighbors: m,
    })
}

/// Asymptotic variance of `q(w) - q(w')`: the two levels are independent.
pub fn qee_variance(a: &VarianceEstimate, b: &VarianceEstimate) -> f64 {
    a.sigma2 + b.sigma2
}

/// Writes `w,tau,estimate,se,density_at_q,M`.
pub fn write_variance_csv<W: std::io::Write>(rows: &[VarianceEstimate], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["w", "tau", "estimate", "se", "density_at_q", "M"])?;
    for r in rows {
        wtr.write_record([
            r.w.to_string(),
            r.tau.to_string(),
            r.estimate.to_string(),
            r.se.to_string(),
            r.density_at_q.to_string(),
            r.m_neighbors.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Pointwise bootstrap bands for one quantile level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBands {
    pub tau: f64,
    pub grid: Vec<f64>,
    /// One curve per successful replicate.
    pub replicates: Vec<Vec<f64>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub failed: usize,
}

impl BootstrapBands {
    fn from_replicates(tau: f64, grid: Vec<f64>, replicates: Vec<Vec<f64>>, alpha: f64, seed: u64, failed: usize) -> Result<Self> {
        let mut out = Self { tau, grid, replicates, lower: Vec::new(), upper: Vec::new(), alpha, seed, failed };
        out.set_alpha(alpha)?;
        Ok(out)
    }

    /// Recomputes the bands at another level from the stored replicates.
    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        check_alpha(alpha)?;
        let ones = vec![1.0; self.replicates.len()];
        let mut lower = Vec::with_capacity(self.grid.len());
        let mut upper = Vec::with_capacity(self.grid.len());
        for g in 0..self.grid.len() {
            let col: Vec<f64> = self.replicates.iter().map(|r| r[g]).collect();
            lower.push(weighted_quantile(&col, &ones, alpha / 2.0)?);
            upper.push(weighted_quantile(&col, &ones, 1.0 - alpha / 2.0)?);
        }
        self.alpha = alpha;
        self.lower = lower;
        self.upper = upper;
        Ok(())
    }

    /// Band for `q(grid[i]) - q(grid[k])` from the same replicates.
    pub fn difference_band(&self, i: usize, k: usize) -> Result<(f64, f64)> {
        let col: Vec<f64> = self.replicates.iter().map(|r| r[i] - r[k]).collect();
        let ones = vec![1.0; col.len()];
        Ok((
            weighted_quantile(&col, &ones, self.alpha / 2.0)?,
            weighted_quantile(&col, &ones, 1.0 - self.alpha / 2.0)?,
        ))
    }

    /// Attaches the bands to a point-estimate curve on the same grid.
    pub fn attach(&self, curve: QuantileCurve) -> Result<QuantileCurve> {
        if curve.grid != self.grid {
            return Err(Error::InvalidArgument("bands and curve use different grids".into()));
        }
        curve.with_bands(self.lower.clone(), self.upper.clone())
    }

    pub fn widths(&self) -> Vec<f64> {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).collect()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Unit-level Exponential(1) multipliers for replicate stream `stream`.
pub fn bootstrap_weights(n: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| Exp1.sample(&mut rng)).collect()
}

/// Weighted bootstrap: replicate `b` multiplies unit weights by Exponential(1)
/// draws, refits GPS, matching and smoothed curves with the fixed
/// configuration, and the bands are pointwise `(alpha/2, 1 - alpha/2)`
/// quantiles of the replicate curves. One entry per level in `cfg.taus`.
pub fn bootstrap_bands(
    ds: &ObservationalDataset,
    cfg: &PipelineConfig,
    b: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<BootstrapBands>> {
    let streams: Vec<u64> = (0..b as u64).collect();
    bootstrap_bands_with_streams(ds, cfg, &streams, alpha, seed)
}

/// [`bootstrap_bands`] with explicit per-replicate streams; repeating a
/// stream repeats the replicate.
pub fn bootstrap_bands_with_streams(
    ds: &ObservationalDataset,
    cfg: &PipelineConfig,
    streams: &[u64],
    alpha: f64,
    seed: u64,
) -> Result<Vec<BootstrapBands>> {
    check_alpha(alpha)?;
    if streams.len() < 2 {
        return Err(Error::InvalidArgument("need at least two bootstrap replicates".into()));
    }
    let runs: Vec<Result<Vec<QuantileCurve>>> = streams
        .par_iter()
        .map(|&s| {
            let xi = bootstrap_weights(ds.n_units(), seed, s);
            fit_smoothed_curves(&ds.reweighted(&xi)?, cfg)
        })
        .collect();
    let total = runs.len();
    let ok: Vec<Vec<QuantileCurve>> = runs
        .into_iter()
        .filter_map(|r| r.map_err(|e| log::warn!("bootstrap replicate failed: {e}")).ok())
        .collect();
    let failed = total - ok.len();
    if failed * 5 > total || ok.len() < 2 {
        return Err(Error::ReplicateFailures { failed, total });
    }
    cfg.taus
        .iter()
        .enumerate()
        .map(|(t, &tau)| {
            let reps = ok.iter().map(|curves| curves[t].estimate.clone()).collect();
            BootstrapBands::from_replicates(tau, cfg.grid.clone(), reps, alpha, seed, failed)
        })
        .collect()
}
