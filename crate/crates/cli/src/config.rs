//! Run configuration: an optional TOML file overlaid by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qerf::dataset::ColumnSchema;
use qerf::matching::{default_delta_grid, default_lambda_grid, MatchConfig};
use qerf::pipeline::DesignChoice;
use qerf::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub data: DataConfig,
    pub design: DesignConfig,
    pub analysis: AnalysisConfig,
    pub bootstrap: BootstrapConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub input: Option<PathBuf>,
    pub exposure_col: Option<String>,
    pub outcome_col: Option<String>,
    pub covariate_cols: Option<Vec<String>>,
    pub weight_col: Option<String>,
    /// Lower and upper exposure quantiles kept before matching.
    pub trim: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignConfig {
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub deltas: Option<Vec<f64>>,
    pub lambdas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub taus: Option<Vec<f64>>,
    pub grid_size: Option<usize>,
    pub h_mean: Option<f64>,
    pub bandwidths: Option<Vec<f64>>,
    pub increment: Option<f64>,
    pub neighbors: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub replicates: Option<usize>,
    pub alpha: Option<f64>,
}

pub const DEFAULT_TAUS: [f64; 7] = [0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95];

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    /// Values set in `over` win.
    pub fn overlay(mut self, over: RunConfig) -> Self {
        macro_rules! take {
            ($($f:ident).+) => {
                if over.$($f).+.is_some() {
                    self.$($f).+ = over.$($f).+;
                }
            };
        }
        take!(seed);
        take!(workers);
        take!(data.input);
        take!(data.exposure_col);
        take!(data.outcome_col);
        take!(data.covariate_cols);
        take!(data.weight_col);
        take!(data.trim);
        take!(design.delta);
        take!(design.lambda);
        take!(design.deltas);
        take!(design.lambdas);
        take!(analysis.taus);
        take!(analysis.grid_size);
        take!(analysis.h_mean);
        take!(analysis.bandwidths);
        take!(analysis.increment);
        take!(analysis.neighbors);
        take!(bootstrap.replicates);
        take!(bootstrap.alpha);
        self
    }

    pub fn input(&self) -> Result<&Path> {
        self.data.input.as_deref().ok_or_else(|| invalid("no input file given"))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| invalid("this command needs --seed"))
    }

    pub fn schema(&self) -> Result<ColumnSchema> {
        let d = &self.data;
        let exposure = d.exposure_col.clone().ok_or_else(|| invalid("no exposure column given"))?;
        let covariates = d.covariate_cols.clone().ok_or_else(|| invalid("no covariate columns given"))?;
        if covariates.is_empty() {
            return Err(invalid("covariate column list is empty"));
        }
        Ok(ColumnSchema { exposure, outcome: d.outcome_col.clone(), covariates, weight: d.weight_col.clone() })
    }

    pub fn trim(&self) -> Result<(f64, f64)> {
        let (lo, hi) = self.data.trim.unwrap_or((0.0, 1.0));
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(invalid(format!("trim fractions ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1")));
        }
        Ok((lo, hi))
    }

    pub fn design_choice(&self) -> Result<DesignChoice> {
        let d = &self.design;
        match (d.delta, d.lambda) {
            (Some(delta), Some(lambda)) => Ok(DesignChoice::Fixed(MatchConfig::new(delta, lambda)?)),
            (None, None) => {
                let deltas = d.deltas.clone().unwrap_or_else(default_delta_grid);
                let lambdas = d.lambdas.clone().unwrap_or_else(default_lambda_grid);
                if deltas.is_empty() || lambdas.is_empty() {
                    return Err(invalid("delta and lambda grids must be non-empty"));
                }
                for &l in &lambdas {
                    MatchConfig::new(deltas[0], l)?;
                }
                for &dl in &deltas {
                    MatchConfig::new(dl, lambdas[0])?;
                }
                Ok(DesignChoice::Grid { deltas, lambdas })
            }
            _ => Err(invalid("a fixed design needs both delta and lambda")),
        }
    }

    pub fn taus(&self) -> Result<Vec<f64>> {
        let taus = self.analysis.taus.clone().unwrap_or_else(|| DEFAULT_TAUS.to_vec());
        if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(invalid("quantile levels must lie strictly between 0 and 1"));
        }
        Ok(taus)
    }

    pub fn grid_size(&self) -> Result<usize> {
        match self.analysis.grid_size.unwrap_or(50) {
            n if n >= 2 => Ok(n),
            n => Err(invalid(format!("grid size {n} is below 2"))),
        }
    }

    pub fn increment(&self) -> Result<f64> {
        match self.analysis.increment.unwrap_or(1.0) {
            v if v > 0.0 && v.is_finite() => Ok(v),
            v => Err(invalid(format!("increment {v} must be positive"))),
        }
    }

    pub fn neighbors(&self) -> Result<usize> {
        match self.analysis.neighbors.unwrap_or(1) {
            0 => Err(invalid("neighbour count must be at least 1")),
            m => Ok(m),
        }
    }

    pub fn replicates(&self) -> usize {
        self.bootstrap.replicates.unwrap_or(0)
    }

    pub fn alpha(&self) -> Result<f64> {
        match self.bootstrap.alpha.unwrap_or(0.05) {
            a if a > 0.0 && a < 1.0 => Ok(a),
            a => Err(invalid(format!("alpha {a} must lie in (0, 1)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_sections_parse() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 3
            [data]
            exposure_col = "pm25"
            covariate_cols = ["a", "b"]
            trim = [0.05, 0.95]
            [design]
            delta = 0.5
            lambda = 0.4
            [analysis]
            taus = [0.5]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.trim().unwrap(), (0.05, 0.95));
        assert_eq!(cfg.design_choice().unwrap(), DesignChoice::Fixed(MatchConfig::new(0.5, 0.4).unwrap()));
        assert!(toml::from_str::<RunConfig>("[data]\nexposure = \"w\"").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file: RunConfig = toml::from_str("seed = 1\n[analysis]\ntaus = [0.1, 0.9]\ngrid_size = 20").unwrap();
        let mut flags = RunConfig { seed: Some(9), ..Default::default() };
        flags.analysis.grid_size = Some(30);
        let cfg = file.overlay(flags);
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.grid_size().unwrap(), 30);
        assert_eq!(cfg.taus().unwrap(), vec![0.1, 0.9]);
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::default();
        assert!(cfg.seed().is_err());
        assert!(cfg.schema().is_err());
        cfg.design.delta = Some(0.5);
        assert!(cfg.design_choice().is_err());
        cfg.data.trim = Some((0.5, 0.5));
        assert!(cfg.trim().is_err());
        cfg.analysis.taus = Some(vec![1.0]);
        assert!(cfg.taus().is_err());
        assert!(matches!(RunConfig::default().design_choice().unwrap(), DesignChoice::Grid { .. }));
    }
}
