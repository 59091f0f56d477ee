//! Design stage: caliper matching on the generalized propensity score and the
//! exposure, with replacement, plus covariate balance diagnostics and the
//! (caliper, scale) grid search.
//!
//! For every exposure level `w_l` and every observed unit `j'`, a template
//! carries `j'`'s covariates with the exposure forced to `w_l`. The template
//! is matched to the observed unit inside `[w_l - delta, w_l + delta]` that
//! minimizes
//!
//! ```text
//! lambda * |e*_j - e*_template| + (1 - lambda) * |w*_j - w*_l|
//! ```
//!
//! on min-max standardized coordinates. Ties go to the lowest unit index.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ExposureRange, ObservationalDataset};
use crate::error::{Error, Result};
use crate::gps::GpsModel;
use crate::stats::weighted_correlation;

const UNMATCHED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub delta: f64,
    pub lambda: f64,
}

impl MatchConfig {
    pub fn new(delta: f64, lambda: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("caliper must be positive, got {delta}")));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!("scale must lie in [0, 1], got {lambda}")));
        }
        Ok(Self { delta, lambda })
    }
}

/// Bin centres `w_min + (2l - 1) delta`, `l = 1..L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureBins {
    levels: Vec<f64>,
    delta: f64,
    range: ExposureRange,
}

impl ExposureBins {
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn range(&self) -> ExposureRange {
        self.range
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Whether `w` lies in `[w^(l) - delta, w^(l) + delta]` for the 0-based
    /// level `l`. Measured from `w_min`, so the lower edge of the first
    /// window is exact.
    pub fn window_contains(&self, level: usize, w: f64) -> bool {
        let d = w - self.range.w_min;
        d >= (2 * level) as f64 * self.delta && d <= (2 * level + 2) as f64 * self.delta
    }
}

/// `L = floor((w_max - w_min) / (2 delta) + 1/2)` equally spaced levels.
pub fn make_bins(range: ExposureRange, delta: f64) -> Result<ExposureBins> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("caliper must be positive, got {delta}")));
    }
    let l = (range.width() / (2.0 * delta) + 0.5).floor();
    if l < 1.0 {
        return Err(Error::CaliperTooLarge);
    }
    let levels = (1..=l as usize)
        .map(|i| range.w_min + (2 * i - 1) as f64 * delta)
        .collect();
    Ok(ExposureBins { levels, delta, range })
}

/// Min-max transform onto `[0, 1]`; a constant input maps to 0.5.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = min_max(values);
    values.iter().map(|&v| scale_unit(v, lo, hi)).collect()
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
}

#[inline]
fn scale_unit(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.5
    }
}

/// The `lambda`-weighted absolute distance used for matching and for
/// neighbour search in variance estimation.
#[inline]
pub fn match_distance(lambda: f64, e_a: f64, e_b: f64, w_a: f64, w_b: f64) -> f64 {
    lambda * (e_a - e_b).abs() + (1.0 - lambda) * (w_a - w_b).abs()
}

/// Finds, for each template GPS coordinate, the candidate minimizing
/// [`match_distance`]. Inputs are standardized coordinates; `cand_units`
/// must be in increasing order. Returns unit indices, one per template.
///
/// Runs in `O((n + m) log n)` with prefix/suffix minima over candidates
/// sorted by GPS coordinate.
pub fn nearest_candidates(
    cand_units: &[u32],
    cand_e: &[f64],
    cand_w: &[f64],
    level_w: f64,
    templates: &[f64],
    lambda: f64,
) -> Vec<u32> {
    let sorted = SortedCandidates::new(cand_units, cand_e, cand_w, level_w);
    let mut out = vec![UNMATCHED; templates.len()];
    sorted.assign(lambda, templates, &mut out);
    out
}

/// Candidates of one level sorted by standardized GPS, reusable across
/// scale values.
struct SortedCandidates {
    unit: Vec<u32>,
    e: Vec<f64>,
    /// `|w*_j - w*_l|`, independent of lambda.
    wdist: Vec<f64>,
}

impl SortedCandidates {
    fn new(cand_units: &[u32], cand_e: &[f64], cand_w: &[f64], level_w: f64) -> Self {
        let mut order: Vec<usize> = (0..cand_units.len()).collect();
        order.sort_by(|&a, &b| cand_e[a].total_cmp(&cand_e[b]).then(cand_units[a].cmp(&cand_units[b])));
        Self {
            unit: order.iter().map(|&i| cand_units[i]).collect(),
            e: order.iter().map(|&i| cand_e[i]).collect(),
            wdist: order.iter().map(|&i| (cand_w[i] - level_w).abs()).collect(),
        }
    }

    #[inline]
    fn distance(&self, lambda: f64, i: usize, t: f64) -> f64 {
        lambda * (self.e[i] - t).abs() + (1.0 - lambda) * self.wdist[i]
    }

    fn assign(&self, lambda: f64, templates: &[f64], out: &mut [u32]) {
        let n = self.unit.len();
        if n == 0 {
            return;
        }
        let wterm: Vec<f64> = self.wdist.iter().map(|d| (1.0 - lambda) * d).collect();
        // Left of the template (e <= t) the distance is lambda*t + (wterm - lambda*e);
        // right of it, (wterm + lambda*e) - lambda*t.
        let better = |ka: f64, ua: u32, kb: f64, ub: u32| ka < kb || (ka == kb && ua < ub);
        let mut prefix = Vec::with_capacity(n);
        let mut best = usize::MAX;
        let mut best_key = f64::INFINITY;
        for i in 0..n {
            let key = wterm[i] - lambda * self.e[i];
            if best == usize::MAX || better(key, self.unit[i], best_key, self.unit[best]) {
                best = i;
                best_key = key;
            }
            prefix.push(best);
        }
        let mut suffix = vec![0usize; n];
        let mut best = usize::MAX;
        let mut best_key = f64::INFINITY;
        for i in (0..n).rev() {
            let key = wterm[i] + lambda * self.e[i];
            if best == usize::MAX || better(key, self.unit[i], best_key, self.unit[best]) {
                best = i;
                best_key = key;
            }
            suffix[i] = best;
        }
        for (slot, &t) in out.iter_mut().zip(templates) {
            let p = self.e.partition_point(|&e| e <= t);
            let left = (p > 0).then(|| prefix[p - 1]);
            let right = (p < n).then(|| suffix[p]);
            let pick = match (left, right) {
                (Some(a), Some(b)) => {
                    let (da, db) = (self.distance(lambda, a, t), self.distance(lambda, b, t));
                    if better(da, self.unit[a], db, self.unit[b]) {
                        a
                    } else {
                        b
                    }
                }
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!(),
            };
            *slot = self.unit[pick];
        }
    }
}

/// Precomputed, lambda-independent pieces of one matching run.
struct MatchContext<'a> {
    ds: &'a ObservationalDataset,
    bins: ExposureBins,
    /// Units sorted by exposure.
    by_exposure: Vec<u32>,
    gps_mean: Vec<f64>,
    gps: &'a GpsModel,
    observed_gps: Vec<f64>,
    obs_gps_range: (f64, f64),
    w_range: (f64, f64),
}

/// Candidates and templates of one level.
struct LevelProblem {
    cands: SortedCandidates,
    templates: Vec<f64>,
}

impl<'a> MatchContext<'a> {
    fn new(ds: &'a ObservationalDataset, gps: &'a GpsModel, delta: f64) -> Result<Self> {
        let range = ds.exposure_range()?;
        let bins = make_bins(range, delta)?;
        let gps_mean = gps.means(ds)?;
        let w = ds.exposure();
        let observed_gps: Vec<f64> = (0..ds.n_units()).map(|j| gps.density_at(w[j], gps_mean[j])).collect();
        let obs_gps_range = min_max(&observed_gps);
        let mut by_exposure: Vec<u32> = (0..ds.n_units() as u32).collect();
        by_exposure.sort_by(|&a, &b| w[a as usize].total_cmp(&w[b as usize]).then(a.cmp(&b)));
        Ok(Self {
            ds,
            bins,
            by_exposure,
            gps_mean,
            gps,
            observed_gps,
            obs_gps_range,
            w_range: (range.w_min, range.w_max),
        })
    }

    fn candidates(&self, level: usize) -> Vec<u32> {
        let w = self.ds.exposure();
        let d = self.bins.delta;
        let (lo, hi) = ((2 * level) as f64 * d, (2 * level + 2) as f64 * d);
        let w_min = self.bins.range.w_min;
        let a = self.by_exposure.partition_point(|&j| w[j as usize] - w_min < lo);
        let b = self.by_exposure.partition_point(|&j| w[j as usize] - w_min <= hi);
        let mut c = self.by_exposure[a..b].to_vec();
        c.sort_unstable();
        c
    }

    /// `None` when the level's bin holds no observed unit.
    fn level_problem(&self, level: usize) -> Option<LevelProblem> {
        let cand = self.candidates(level);
        if cand.is_empty() {
            return None;
        }
        let wl = self.bins.levels[level];
        let raw_templates: Vec<f64> = self.gps_mean.iter().map(|&m| self.gps.density_at(wl, m)).collect();
        let (tlo, thi) = min_max(&raw_templates);
        let lo = tlo.min(self.obs_gps_range.0);
        let hi = thi.max(self.obs_gps_range.1);
        let templates = raw_templates.iter().map(|&v| scale_unit(v, lo, hi)).collect();
        let (wlo, whi) = self.w_range;
        let w = self.ds.exposure();
        let cand_e: Vec<f64> = cand.iter().map(|&j| scale_unit(self.observed_gps[j as usize], lo, hi)).collect();
        let cand_w: Vec<f64> = cand.iter().map(|&j| scale_unit(w[j as usize], wlo, whi)).collect();
        let cands = SortedCandidates::new(&cand, &cand_e, &cand_w, scale_unit(wl, wlo, whi));
        Some(LevelProblem { cands, templates })
    }
}

/// The `L x N` matched set produced by [`match_templates`].
#[derive(Debug, Clone)]
pub struct MatchedDataset<'a> {
    source: &'a ObservationalDataset,
    gps: GpsModel,
    bins: ExposureBins,
    config: MatchConfig,
    /// Per level, the matched unit of each template; `None` for a level whose
    /// bin is empty.
    match_index: Vec<Option<Vec<u32>>>,
    k_count: Vec<u32>,
    /// Per level, `(unit, K_j^(l))` with positive counts, sorted by unit.
    occupancy: Vec<Vec<(u32, u32)>>,
    observed_gps: Vec<f64>,
}

impl<'a> MatchedDataset<'a> {
    /// Assembles a matched set from per-level template assignments, checking
    /// that every matched unit lies inside its level's caliper window.
    pub fn from_assignments(
        source: &'a ObservationalDataset,
        gps: GpsModel,
        config: MatchConfig,
        match_index: Vec<Option<Vec<u32>>>,
    ) -> Result<Self> {
        let bins = make_bins(source.exposure_range()?, config.delta)?;
        if match_index.len() != bins.len() {
            return Err(Error::DimensionMismatch { expected: bins.len(), got: match_index.len() });
        }
        let n = source.n_units();
        let w = source.exposure();
        let mut k_count = vec![0u32; n];
        let mut occupancy = Vec::with_capacity(bins.len());
        for (l, level) in match_index.iter().enumerate() {
            let mut occ: Vec<(u32, u32)> = Vec::new();
            if let Some(row) = level {
                if row.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: row.len() });
                }
                let mut counts = std::collections::BTreeMap::new();
                for &j in row {
                    if j == UNMATCHED {
                        continue;
                    }
                    let ju = j as usize;
                    if ju >= n || !bins.window_contains(l, w[ju]) {
                        return Err(Error::InvalidDataset(format!(
                            "unit {j} is outside the caliper window of level {l}"
                        )));
                    }
                    *counts.entry(j).or_insert(0u32) += 1;
                }
                for (&j, &c) in &counts {
                    k_count[j as usize] += c;
                    occ.push((j, c));
                }
            }
            occupancy.push(occ);
        }
        let means = gps.means(source)?;
        let observed_gps = (0..n).map(|j| gps.density_at(w[j], means[j])).collect();
        Ok(Self { source, gps, bins, config, match_index, k_count, occupancy, observed_gps })
    }

    pub fn source(&self) -> &'a ObservationalDataset {
        self.source
    }

    pub fn gps(&self) -> &GpsModel {
        &self.gps
    }

    pub fn bins(&self) -> &ExposureBins {
        &self.bins
    }

    pub fn config(&self) -> MatchConfig {
        self.config
    }

    pub fn delta(&self) -> f64 {
        self.config.delta
    }

    /// Replacement counts `K_j`, one per observed unit.
    pub fn k_count(&self) -> &[u32] {
        &self.k_count
    }

    /// Per-level occupancy `(unit, K_j^(l))`.
    pub fn occupancy(&self, level: usize) -> &[(u32, u32)] {
        &self.occupancy[level]
    }

    /// Observed unit matched to template `template` at `level`.
    pub fn matched_unit(&self, level: usize, template: usize) -> Option<usize> {
        self.match_index[level]
            .as_ref()
            .map(|row| row[template])
            .filter(|&j| j != UNMATCHED)
            .map(|j| j as usize)
    }

    /// Number of matched templates at each level.
    pub fn coverage(&self) -> Vec<usize> {
        self.occupancy
            .iter()
            .map(|occ| occ.iter().map(|&(_, c)| c as usize).sum())
            .collect()
    }

    pub fn n_matched_templates(&self) -> usize {
        self.coverage().iter().sum()
    }

    /// Estimated GPS of each observed unit at its own exposure and covariates.
    pub fn observed_gps(&self) -> &[f64] {
        &self.observed_gps
    }

    /// Effective per-unit weight `K_j * unit_weight_j`.
    pub fn unit_weights(&self) -> Vec<f64> {
        self.k_count
            .iter()
            .zip(self.source.unit_weight())
            .map(|(&k, &u)| k as f64 * u)
            .collect()
    }

    /// Writes one row per matched template:
    /// `level_index,level_value,template_index,matched_unit_index,matched_y,matched_w`.
    /// `matched_y` is left empty when the source was loaded outcome-blind.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "level_index",
            "level_value",
            "template_index",
            "matched_unit_index",
            "matched_y",
            "matched_w",
        ])?;
        let y = self.source.outcome().ok();
        let w = self.source.exposure();
        for (l, row) in self.match_index.iter().enumerate() {
            let Some(row) = row else { continue };
            for (t, &j) in row.iter().enumerate() {
                if j == UNMATCHED {
                    continue;
                }
                let ju = j as usize;
                wtr.write_record([
                    l.to_string(),
                    self.bins.levels[l].to_string(),
                    t.to_string(),
                    j.to_string(),
                    y.map(|y| y[ju].to_string()).unwrap_or_default(),
                    w[ju].to_string(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Rebuilds a matched set from [`MatchedDataset::write_csv`] output.
    pub fn read_csv<R: Read>(
        reader: R,
        source: &'a ObservationalDataset,
        gps: GpsModel,
        config: MatchConfig,
    ) -> Result<Self> {
        let bins = make_bins(source.exposure_range()?, config.delta)?;
        let n = source.n_units();
        let mut match_index: Vec<Option<Vec<u32>>> = vec![None; bins.len()];
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let (cl, ct, cj) = (col("level_index")?, col("template_index")?, col("matched_unit_index")?);
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let get = |c: usize| -> Result<usize> {
                rec.get(c)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::ParseFailure { row: i + 1, col: headers[c].to_string() })
            };
            let (l, t, j) = (get(cl)?, get(ct)?, get(cj)?);
            if l >= bins.len() || t >= n || j >= n {
                return Err(Error::ParseFailure { row: i + 1, col: "level_index".into() });
            }
            match_index[l].get_or_insert_with(|| vec![UNMATCHED; n])[t] = j as u32;
        }
        Self::from_assignments(source, gps, config, match_index)
    }
}

/// Runs the matching for one `(delta, lambda)` configuration.
pub fn match_templates<'a>(
    ds: &'a ObservationalDataset,
    gps: &GpsModel,
    cfg: MatchConfig,
) -> Result<MatchedDataset<'a>> {
    let ctx = MatchContext::new(ds, gps, cfg.delta)?;
    let n = ds.n_units();
    let match_index: Vec<Option<Vec<u32>>> = (0..ctx.bins.len())
        .into_par_iter()
        .map(|l| {
            ctx.level_problem(l).map(|p| {
                let mut row = vec![UNMATCHED; n];
                p.cands.assign(cfg.lambda, &p.templates, &mut row);
                row
            })
        })
        .collect();
    if match_index.iter().all(Option::is_none) {
        return Err(Error::NoCandidatesAnywhere);
    }
    let empty = match_index.iter().filter(|r| r.is_none()).count();
    if empty > 0 {
        log::debug!("{empty} of {} exposure bins are empty; their templates stay unmatched", match_index.len());
    }
    let observed_gps = ctx.observed_gps.clone();
    let bins = ctx.bins.clone();
    let mut out = MatchedDataset::from_assignments(ds, gps.clone(), cfg, match_index)?;
    out.bins = bins;
    out.observed_gps = observed_gps;
    Ok(out)
}

/// Absolute exposure-covariate correlations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub covariate_names: Vec<String>,
    pub per_covariate_abs_corr: Vec<f64>,
    pub aac: f64,
    pub median_abs_corr: f64,
}

impl BalanceReport {
    fn from_correlations(names: Vec<String>, corr: Vec<f64>) -> Self {
        let aac = if corr.is_empty() { 0.0 } else { corr.iter().sum::<f64>() / corr.len() as f64 };
        let mut sorted = corr.clone();
        sorted.sort_by(f64::total_cmp);
        let median_abs_corr = match sorted.len() {
            0 => 0.0,
            m if m % 2 == 1 => sorted[m / 2],
            m => 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]),
        };
        Self { covariate_names: names, per_covariate_abs_corr: corr, aac, median_abs_corr }
    }
}

/// Balance on weighted rows: `rows` is `(exposure, unit, weight)`.
fn balance_rows(ds: &ObservationalDataset, rows: &[(f64, u32, f64)]) -> Result<BalanceReport> {
    let x: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let wt: Vec<f64> = rows.iter().map(|r| r.2).collect();
    if !(wt.iter().sum::<f64>() > 0.0) {
        return Err(Error::ZeroTotalWeight);
    }
    let mut corr = Vec::with_capacity(ds.n_covariates());
    for k in 0..ds.n_covariates() {
        let c: Vec<f64> = rows.iter().map(|r| ds.covariate_row(r.1 as usize)[k]).collect();
        let r = weighted_correlation(&x, &c, &wt).ok_or(Error::DegenerateExposure)?;
        corr.push(r.abs());
    }
    Ok(BalanceReport::from_correlations(ds.covariate_names().to_vec(), corr))
}

fn occupancy_rows(ds: &ObservationalDataset, levels: &[f64], occupancy: &[Vec<(u32, u32)>]) -> Result<BalanceReport> {
    let rows: Vec<(f64, u32, f64)> = occupancy
        .iter()
        .enumerate()
        .flat_map(|(l, occ)| occ.iter().map(move |&(j, c)| (levels[l], j, c as f64)))
        .collect();
    if rows.is_empty() {
        return Err(Error::NoCandidatesAnywhere);
    }
    balance_rows(ds, &rows)
}

/// Balance of the matched set: each matched template contributes the level
/// exposure `w_l` and the covariates of its matched unit.
pub fn balance_report(matched: &MatchedDataset) -> Result<BalanceReport> {
    occupancy_rows(matched.source, &matched.bins.levels, &matched.occupancy)
}

pub fn balance_report_raw(ds: &ObservationalDataset) -> Result<BalanceReport> {
    let rows: Vec<(f64, u32, f64)> = (0..ds.n_units()).map(|j| (ds.exposure()[j], j as u32, 1.0)).collect();
    balance_rows(ds, &rows)
}

pub fn balance_report_weighted(ds: &ObservationalDataset, weights: &[f64]) -> Result<BalanceReport> {
    if weights.len() != ds.n_units() {
        return Err(Error::DimensionMismatch { expected: ds.n_units(), got: weights.len() });
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::InvalidArgument("balance weights must be nonnegative".into()));
    }
    let rows: Vec<(f64, u32, f64)> = (0..ds.n_units()).map(|j| (ds.exposure()[j], j as u32, weights[j])).collect();
    balance_rows(ds, &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningCell {
    pub delta: f64,
    pub lambda: f64,
    /// 1 when matching failed for this cell.
    pub aac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub config: MatchConfig,
    pub report: BalanceReport,
    pub grid: Vec<TuningCell>,
}

/// `delta in {0.125, 0.25, ..., 2.5}`.
pub fn default_delta_grid() -> Vec<f64> {
    (1..=20).map(|i| 0.125 * i as f64).collect()
}

/// `lambda in {0.2, 0.4, ..., 1}`.
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=5).map(|i| 0.2 * i as f64).collect()
}

/// Exhaustive AAC minimization over the `(delta, lambda)` grid. Ties go to
/// the larger caliper, then the larger scale.
pub fn tune_hyperparameters(
    ds: &ObservationalDataset,
    gps: &GpsModel,
    delta_grid: &[f64],
    lambda_grid: &[f64],
) -> Result<TuningResult> {
    if delta_grid.is_empty() || lambda_grid.is_empty() {
        return Err(Error::InvalidArgument("tuning grids must be nonempty".into()));
    }
    for &l in lambda_grid {
        MatchConfig::new(1.0, l)?;
    }
    // One task per caliper; the level problems are shared by every scale value.
    let per_delta: Vec<Vec<Result<BalanceReport>>> = delta_grid
        .par_iter()
        .map(|&delta| tune_one_delta(ds, gps, delta, lambda_grid))
        .collect();

    let mut grid = Vec::new();
    let mut usable = Vec::new();
    for (di, row) in per_delta.iter().enumerate() {
        for (li, cell) in row.iter().enumerate() {
            let aac = match cell {
                Ok(r) => r.aac,
                Err(e) => {
                    log::debug!("tuning cell delta={} lambda={} failed: {e}", delta_grid[di], lambda_grid[li]);
                    1.0
                }
            };
            grid.push(TuningCell { delta: delta_grid[di], lambda: lambda_grid[li], aac });
            usable.push(cell.is_ok());
        }
    }
    let Some(idx) = best_cell(&grid, &usable) else {
        return Err(match &per_delta[0][0] {
            Err(Error::CaliperTooLarge) => Error::CaliperTooLarge,
            Err(Error::DegenerateExposure) => Error::DegenerateExposure,
            _ => Error::NoCandidatesAnywhere,
        });
    };
    let (di, li) = (idx / lambda_grid.len(), idx % lambda_grid.len());
    let report = per_delta[di][li].as_ref().cloned().map_err(|_| Error::NoCandidatesAnywhere)?;
    Ok(TuningResult { config: MatchConfig::new(delta_grid[di], lambda_grid[li])?, report, grid })
}

/// Lowest AAC among usable cells; ties go to the larger caliper, then the
/// larger scale.
fn best_cell(cells: &[TuningCell], usable: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        if !usable[i] {
            continue;
        }
        let replace = match best {
            None => true,
            Some(b) => {
                let b = &cells[b];
                c.aac < b.aac
                    || (c.aac == b.aac && (c.delta > b.delta || (c.delta == b.delta && c.lambda > b.lambda)))
            }
        };
        if replace {
            best = Some(i);
        }
    }
    best
}

fn tune_one_delta(
    ds: &ObservationalDataset,
    gps: &GpsModel,
    delta: f64,
    lambdas: &[f64],
) -> Vec<Result<BalanceReport>> {
    let ctx = match MatchContext::new(ds, gps, delta) {
        Ok(c) => c,
        Err(e) => return lambdas.iter().map(|_| Err(clone_err(&e))).collect(),
    };
    let n = ds.n_units();
    let mut occupancy: Vec<Vec<Vec<(u32, u32)>>> = vec![Vec::with_capacity(ctx.bins.len()); lambdas.len()];
    let mut row = vec![UNMATCHED; n];
    let mut counts = vec![0u32; n];
    let mut any = false;
    for l in 0..ctx.bins.len() {
        let problem = ctx.level_problem(l);
        for (li, &lambda) in lambdas.iter().enumerate() {
            let occ = match &problem {
                None => Vec::new(),
                Some(p) => {
                    any = true;
                    p.cands.assign(lambda, &p.templates, &mut row);
                    for &j in &row {
                        counts[j as usize] += 1;
                    }
                    let mut occ = Vec::new();
                    for &j in &p.cands.unit {
                        let c = std::mem::take(&mut counts[j as usize]);
                        if c > 0 {
                            occ.push((j, c));
                        }
                    }
                    occ.sort_unstable();
                    occ
                }
            };
            occupancy[li].push(occ);
        }
    }
    if !any {
        return lambdas.iter().map(|_| Err(Error::NoCandidatesAnywhere)).collect();
    }
    occupancy
        .iter()
        .map(|occ| occupancy_rows(ds, &ctx.bins.levels, occ))
        .collect()
}

fn clone_err(e: &Error) -> Error {
    match e {
        Error::CaliperTooLarge => Error::CaliperTooLarge,
        Error::DegenerateExposure => Error::DegenerateExposure,
        Error::DimensionMismatch { expected, got } => Error::DimensionMismatch { expected: *expected, got: *got },
        other => Error::InvalidArgument(other.to_string()),
    }
}
