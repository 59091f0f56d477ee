//! Observational data model and CSV ingestion.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::weighted_quantile;

/// Units with a continuous exposure, pre-exposure covariates, an outcome and
/// an optional positive population weight.
///
/// Covariates are stored row-major (`n_units x q`). The outcome is optional so
/// that the design stage can run without ever loading it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationalDataset {
    exposure: Vec<f64>,
    covariates: Vec<f64>,
    n_covariates: usize,
    outcome: Option<Vec<f64>>,
    unit_weight: Vec<f64>,
    covariate_names: Vec<String>,
}

impl ObservationalDataset {
    /// Builds a dataset from covariate rows. All unit weights start at 1.
    pub fn new(
        exposure: Vec<f64>,
        covariate_rows: Vec<Vec<f64>>,
        outcome: Option<Vec<f64>>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = exposure.len();
        let q = covariate_names.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if n < 2 {
            return Err(Error::InvalidDataset("need at least two units".into()));
        }
        if covariate_rows.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: covariate_rows.len() });
        }
        let mut covariates = Vec::with_capacity(n * q);
        for row in &covariate_rows {
            if row.len() != q {
                return Err(Error::DimensionMismatch { expected: q, got: row.len() });
            }
            covariates.extend_from_slice(row);
        }
        if let Some(y) = &outcome {
            if y.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: y.len() });
            }
        }
        let ds = Self {
            exposure,
            covariates,
            n_covariates: q,
            outcome,
            unit_weight: vec![1.0; n],
            covariate_names,
        };
        ds.check_finite()?;
        Ok(ds)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n_units() {
            return Err(Error::DimensionMismatch { expected: self.n_units(), got: weights.len() });
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidDataset(format!("unit weight at unit {i} is not positive")));
        }
        self.unit_weight = weights;
        Ok(self)
    }

    fn check_finite(&self) -> Result<()> {
        let bad = |v: &[f64]| v.iter().position(|x| !x.is_finite());
        if let Some(i) = bad(&self.exposure) {
            return Err(Error::InvalidDataset(format!("exposure of unit {i} is not finite")));
        }
        if let Some(i) = bad(&self.covariates) {
            return Err(Error::InvalidDataset(format!(
                "covariate of unit {} is not finite",
                i / self.n_covariates.max(1)
            )));
        }
        if let Some(y) = &self.outcome {
            if let Some(i) = bad(y) {
                return Err(Error::InvalidDataset(format!("outcome of unit {i} is not finite")));
            }
        }
        Ok(())
    }

    pub fn n_units(&self) -> usize {
        self.exposure.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn exposure(&self) -> &[f64] {
        &self.exposure
    }

    /// The outcome column, or `MissingColumn` for an outcome-blind dataset.
    pub fn outcome(&self) -> Result<&[f64]> {
        self.outcome
            .as_deref()
            .ok_or_else(|| Error::MissingColumn("outcome".into()))
    }

    pub fn has_outcome(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn unit_weight(&self) -> &[f64] {
        &self.unit_weight
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_row(&self, unit: usize) -> &[f64] {
        let q = self.n_covariates;
        &self.covariates[unit * q..(unit + 1) * q]
    }

    pub fn covariate_column(&self, k: usize) -> Vec<f64> {
        (0..self.n_units()).map(|i| self.covariate_row(i)[k]).collect()
    }

    pub fn exposure_range(&self) -> Result<ExposureRange> {
        let (lo, hi) = self
            .exposure
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &w| (a.min(w), b.max(w)));
        ExposureRange::new(lo, hi)
    }

    /// Units at the given indices, in that order.
    pub fn subset(&self, units: &[usize]) -> Self {
        let q = self.n_covariates;
        let mut covariates = Vec::with_capacity(units.len() * q);
        for &i in units {
            covariates.extend_from_slice(self.covariate_row(i));
        }
        Self {
            exposure: units.iter().map(|&i| self.exposure[i]).collect(),
            covariates,
            n_covariates: q,
            outcome: self.outcome.as_ref().map(|y| units.iter().map(|&i| y[i]).collect()),
            unit_weight: units.iter().map(|&i| self.unit_weight[i]).collect(),
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// Copy with every unit weight multiplied by the matching factor.
    pub fn reweighted(&self, factors: &[f64]) -> Result<Self> {
        let weights = self.unit_weight.iter().zip(factors).map(|(a, b)| a * b).collect();
        self.clone().with_weights(weights)
    }

    /// Copy without the outcome column.
    pub fn without_outcome(&self) -> Self {
        Self { outcome: None, ..self.clone() }
    }
}

/// Observed exposure support `[w_min, w_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureRange {
    pub w_min: f64,
    pub w_max: f64,
}

impl ExposureRange {
    pub fn new(w_min: f64, w_max: f64) -> Result<Self> {
        if !(w_min.is_finite() && w_max.is_finite() && w_min < w_max) {
            return Err(Error::DegenerateExposure);
        }
        Ok(Self { w_min, w_max })
    }

    pub fn width(&self) -> f64 {
        self.w_max - self.w_min
    }

    pub fn contains(&self, w: f64) -> bool {
        w >= self.w_min && w <= self.w_max
    }
}

/// Maps CSV header names onto dataset roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub exposure: String,
    /// `None` loads the data outcome-blind.
    pub outcome: Option<String>,
    pub covariates: Vec<String>,
    pub weight: Option<String>,
}

impl ColumnSchema {
    pub fn new(exposure: &str, outcome: &str, covariates: &[&str]) -> Self {
        Self {
            exposure: exposure.into(),
            outcome: Some(outcome.into()),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            weight: None,
        }
    }

    pub fn with_weight(mut self, col: &str) -> Self {
        self.weight = Some(col.into());
        self
    }

    pub fn outcome_blind(&self) -> Self {
        Self { outcome: None, ..self.clone() }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<ObservationalDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Reads a header-first, comma-separated file with `.` decimals.
pub fn read_csv<R: Read>(reader: R, schema: &ColumnSchema) -> Result<ObservationalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let w_col = find(&schema.exposure)?;
    let y_col = schema.outcome.as_deref().map(find).transpose()?;
    let c_cols = schema.covariates.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let u_col = schema.weight.as_deref().map(find).transpose()?;

    let mut exposure = Vec::new();
    let mut outcome = y_col.map(|_| Vec::new());
    let mut rows = Vec::new();
    let mut weights = u_col.map(|_| Vec::new());

    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let parse = |col: usize| -> Result<f64> {
            let name = || headers.get(col).unwrap_or_default().to_string();
            let raw = rec.get(col).ok_or_else(|| Error::ParseFailure { row, col: name() })?;
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::ParseFailure { row, col: name() }),
            }
        };
        exposure.push(parse(w_col)?);
        if let (Some(c), Some(y)) = (y_col, outcome.as_mut()) {
            y.push(parse(c)?);
        }
        rows.push(c_cols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>>>()?);
        if let (Some(c), Some(u)) = (u_col, weights.as_mut()) {
            let v = parse(c)?;
            if v <= 0.0 {
                return Err(Error::ParseFailure { row, col: headers[c].to_string() });
            }
            u.push(v);
        }
    }
    let ds = ObservationalDataset::new(exposure, rows, outcome, schema.covariates.clone())?;
    match weights {
        Some(u) => ds.with_weights(u),
        None => Ok(ds),
    }
}

/// Writes the dataset with covariate columns first, then `w`, `y` (when
/// present) and `weight` (when any weight differs from 1).
pub fn write_csv<W: Write>(ds: &ObservationalDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let with_weight = ds.unit_weight.iter().any(|&u| u != 1.0);
    let mut header: Vec<String> = ds.covariate_names.clone();
    header.push("w".into());
    if ds.has_outcome() {
        header.push("y".into());
    }
    if with_weight {
        header.push("weight".into());
    }
    wtr.write_record(&header)?;
    for i in 0..ds.n_units() {
        let mut rec: Vec<String> = ds.covariate_row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.exposure[i].to_string());
        if let Some(y) = &ds.outcome {
            rec.push(y[i].to_string());
        }
        if with_weight {
            rec.push(ds.unit_weight[i].to_string());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Keeps units whose exposure lies between the weighted `lo_pct` and
/// `hi_pct` quantiles (inclusive), using the `weighted_quantile` convention.
pub fn trim_exposure(ds: &ObservationalDataset, lo_pct: f64, hi_pct: f64) -> Result<ObservationalDataset> {
    if !(0.0..=1.0).contains(&lo_pct) || !(0.0..=1.0).contains(&hi_pct) {
        return Err(Error::InvalidArgument("trim fractions must lie in [0, 1]".into()));
    }
    if lo_pct >= hi_pct {
        return Err(Error::EmptyAfterTrim);
    }
    let bound = |p: f64| -> Result<f64> {
        if p <= 0.0 {
            Ok(f64::NEG_INFINITY)
        } else if p >= 1.0 {
            Ok(f64::INFINITY)
        } else {
            weighted_quantile(&ds.exposure, &ds.unit_weight, p)
        }
    };
    let (lo, hi) = (bound(lo_pct)?, bound(hi_pct)?);
    let keep: Vec<usize> = (0..ds.n_units())
        .filter(|&i| ds.exposure[i] >= lo && ds.exposure[i] <= hi)
        .collect();
    match keep.len() {
        0 => Err(Error::EmptyAfterTrim),
        1 => Err(Error::InvalidDataset("a single unit survives trimming".into())),
        _ => Ok(ds.subset(&keep)),
    }
}
