//! Matching-based estimation of quantile exposure-response functions for a
//! continuous exposure.
//!
//! The design stage ([`gps`], [`matching`]) fits a generalized propensity
//! score and matches every unit to every exposure level within a caliper,
//! without looking at outcomes. The analysis stage ([`quantile`],
//! [`inference`]) estimates conditional-on-exposure quantiles of the
//! potential outcome from the matched set. [`simbench`] reproduces the
//! simulation study comparing the estimators.

pub mod dataset;
pub mod error;
pub mod export;
pub mod gps;
pub mod inference;
pub mod matching;
pub mod pipeline;
pub mod quantile;
pub mod simbench;
pub mod stats;

pub use dataset::{load_csv, trim_exposure, ColumnSchema, ExposureRange, ObservationalDataset};
pub use error::{Error, Result};
pub use gps::{evaluate_gps, evaluate_marginal, fit_linear_gps, fit_marginal_density, GpsModel, MarginalDensity};
pub use matching::{
    balance_report, balance_report_raw, match_templates, tune_hyperparameters, BalanceReport, ExposureBins,
    MatchConfig, MatchedDataset, TuningResult,
};
pub use quantile::{
    adjust_bandwidth, qee_empirical, qee_smooth, qerf_empirical, qerf_empirical_curve, qerf_smooth,
    select_bandwidth_mean, weighted_quantile, BandwidthSpec, CurveKind, QuantileCurve,
};
