//! End-to-end fits shared by the bootstrap, the benchmark and the CLI.

use serde::{Deserialize, Serialize};

use crate::dataset::ObservationalDataset;
use crate::error::{Error, Result};
use crate::gps::{fit_linear_gps, GpsModel};
use crate::matching::{
    default_delta_grid, default_lambda_grid, match_templates, tune_hyperparameters, MatchConfig, MatchedDataset,
    TuningResult,
};
use crate::quantile::{adjust_bandwidth, default_bandwidth_grid, qerf_smooth_sample, QuantileCurve, WeightedSample};
use crate::stats::linspace;

/// Weighted exposure quantiles `(lo, hi)`, e.g. `(0.05, 0.95)`.
pub fn central_window(ds: &ObservationalDataset, lo: f64, hi: f64) -> Result<(f64, f64)> {
    let a = crate::quantile::weighted_quantile(ds.exposure(), ds.unit_weight(), lo)?;
    let b = crate::quantile::weighted_quantile(ds.exposure(), ds.unit_weight(), hi)?;
    Ok((a, b))
}

/// `n` equally spaced points between the 5th and 95th weighted exposure
/// percentiles.
pub fn evaluation_grid(ds: &ObservationalDataset, n: usize) -> Result<Vec<f64>> {
    let (a, b) = central_window(ds, 0.05, 0.95)?;
    if !(b > a) {
        return Err(Error::DegenerateExposure);
    }
    Ok(linspace(a, b, n))
}

/// Bandwidth candidates spanning the central 90% of the exposure
/// distribution, together with that window.
pub fn bandwidth_candidates(ds: &ObservationalDataset) -> Result<(Vec<f64>, (f64, f64))> {
    let win = central_window(ds, 0.05, 0.95)?;
    let span = win.1 - win.0;
    if !(span > 0.0) {
        return Err(Error::DegenerateExposure);
    }
    Ok((default_bandwidth_grid(span), win))
}

/// How the design stage picks `(delta, lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DesignChoice {
    Fixed(MatchConfig),
    Grid { deltas: Vec<f64>, lambdas: Vec<f64> },
}

impl Default for DesignChoice {
    fn default() -> Self {
        DesignChoice::Grid { deltas: default_delta_grid(), lambdas: default_lambda_grid() }
    }
}

/// Outcome-free result of the design stage.
#[derive(Debug, Clone)]
pub struct Design {
    pub gps: GpsModel,
    pub config: MatchConfig,
    pub tuning: Option<TuningResult>,
}

pub fn run_design(ds: &ObservationalDataset, choice: &DesignChoice) -> Result<Design> {
    let gps = fit_linear_gps(ds)?;
    match choice {
        DesignChoice::Fixed(cfg) => Ok(Design { gps, config: *cfg, tuning: None }),
        DesignChoice::Grid { deltas, lambdas } => {
            let t = tune_hyperparameters(ds, &gps, deltas, lambdas)?;
            Ok(Design { gps, config: t.config, tuning: Some(t) })
        }
    }
}

impl Design {
    pub fn matched<'a>(&self, ds: &'a ObservationalDataset) -> Result<MatchedDataset<'a>> {
        match_templates(ds, &self.gps, self.config)
    }
}

/// Everything needed to refit smoothed curves on a reweighted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub matching: MatchConfig,
    pub h_mean: f64,
    pub taus: Vec<f64>,
    pub grid: Vec<f64>,
}

/// Fits the GPS, matches with the fixed configuration and returns one
/// smoothed curve per quantile level.
pub fn fit_smoothed_curves(ds: &ObservationalDataset, cfg: &PipelineConfig) -> Result<Vec<QuantileCurve>> {
    let gps = fit_linear_gps(ds)?;
    let matched = match_templates(ds, &gps, cfg.matching)?;
    smoothed_curves(&matched, cfg)
}

pub fn smoothed_curves(matched: &MatchedDataset, cfg: &PipelineConfig) -> Result<Vec<QuantileCurve>> {
    let sample = WeightedSample::from_matched(matched)?;
    cfg.taus
        .iter()
        .map(|&tau| qerf_smooth_sample(&sample, &cfg.grid, tau, adjust_bandwidth(cfg.h_mean, tau)?))
        .collect()
}
