//! Analysis stage: weighted quantiles, the caliper-window (empirical) and
//! kernel-smoothed quantile exposure-response estimators, bandwidth choice
//! and quantile exposure effects.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MatchedDataset;
use crate::stats::{logspace, norm_inv_cdf, norm_ln_pdf, norm_pdf};

/// Check loss `rho_tau(u) = u (tau - 1(u < 0))`.
#[inline]
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("quantile level must lie in (0, 1), got {tau}")))
    }
}

/// Smallest minimizer of `sum_j w_j rho_tau(y_j - q)`: the smallest value
/// whose cumulative weight reaches `tau * sum(w)`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if values.len() != weights.len() {
        return Err(Error::DimensionMismatch { expected: values.len(), got: weights.len() });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    quantile_sorted(order.iter().map(|&i| (values[i], weights[i])), tau)
}

/// Inverse weighted CDF over `(value, weight)` pairs already sorted by value.
fn quantile_sorted<I>(pairs: I, tau: f64) -> Result<f64>
where
    I: Iterator<Item = (f64, f64)> + Clone,
{
    let total: f64 = pairs.clone().map(|p| p.1).sum();
    if !(total > 0.0) {
        return Err(Error::ZeroTotalWeight);
    }
    // Cumulative sums carry rounding; a relative slack keeps exact ties
    // (flat loss) on their left endpoint.
    let target = tau * total * (1.0 - 1e-12);
    let mut cum = 0.0;
    let mut last = f64::NAN;
    for (v, w) in pairs {
        if w <= 0.0 {
            continue;
        }
        cum += w;
        last = v;
        if cum >= target {
            return Ok(v);
        }
    }
    Ok(last)
}

/// Several quantile levels in one pass over sorted pairs. `taus` must be
/// increasing.
fn quantiles_sorted(pairs: &[(f64, f64)], taus: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    if !(total > 0.0) {
        return Err(Error::ZeroTotalWeight);
    }
    let mut out = Vec::with_capacity(taus.len());
    let mut k = 0;
    let mut cum = 0.0;
    let mut last = f64::NAN;
    for &(v, w) in pairs {
        if w <= 0.0 {
            continue;
        }
        cum += w;
        last = v;
        while k < taus.len() && cum >= taus[k] * total * (1.0 - 1e-12) {
            out.push(v);
            k += 1;
        }
        if k == taus.len() {
            break;
        }
    }
    while out.len() < taus.len() {
        out.push(last);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Empirical,
    Smoothed,
}

/// A quantile exposure-response curve on an exposure grid. `NaN` marks grid
/// points where the estimator is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCurve {
    pub tau: f64,
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub kind: CurveKind,
}

impl QuantileCurve {
    pub fn new(tau: f64, grid: Vec<f64>, estimate: Vec<f64>, kind: CurveKind) -> Result<Self> {
        check_tau(tau)?;
        check_grid(&grid)?;
        if estimate.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: estimate.len() });
        }
        Ok(Self { tau, grid, estimate, lower: None, upper: None, kind })
    }

    pub fn with_bands(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != self.grid.len() || upper.len() != self.grid.len() {
            return Err(Error::DimensionMismatch { expected: self.grid.len(), got: lower.len().min(upper.len()) });
        }
        self.lower = Some(lower);
        self.upper = Some(upper);
        Ok(self)
    }

    /// `q(w_{g+1}) - q(w_g)` for consecutive grid points.
    pub fn consecutive_differences(&self) -> Vec<f64> {
        self.estimate.windows(2).map(|p| p[1] - p[0]).collect()
    }

    /// Estimate at a grid point, looked up exactly.
    pub fn at(&self, w: f64) -> Option<f64> {
        self.grid.iter().position(|&g| g == w).map(|i| self.estimate[i]).filter(|v| v.is_finite())
    }

    /// Writes `tau,w,estimate,lower,upper`; undefined values are written as `NA`.
    pub fn write_csv<W: Write>(curves: &[QuantileCurve], writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["tau", "w", "estimate", "lower", "upper"])?;
        let fmt = |v: f64| if v.is_finite() { v.to_string() } else { "NA".to_string() };
        for c in curves {
            for i in 0..c.grid.len() {
                wtr.write_record([
                    c.tau.to_string(),
                    c.grid[i].to_string(),
                    fmt(c.estimate[i]),
                    c.lower.as_ref().map(|v| fmt(v[i])).unwrap_or_default(),
                    c.upper.as_ref().map(|v| fmt(v[i])).unwrap_or_default(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("exposure grid is empty".into()));
    }
    if grid.windows(2).any(|p| !(p[1] > p[0])) || grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidArgument("exposure grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Matched units with positive replacement count: `(W_j, Y_j, K_j * u_j)`.
#[derive(Debug, Clone)]
pub struct WeightedSample {
    pub w: Vec<f64>,
    pub y: Vec<f64>,
    pub weight: Vec<f64>,
}

impl WeightedSample {
    pub fn new(w: Vec<f64>, y: Vec<f64>, weight: Vec<f64>) -> Result<Self> {
        if w.len() != y.len() || w.len() != weight.len() {
            return Err(Error::DimensionMismatch { expected: w.len(), got: y.len().min(weight.len()) });
        }
        Ok(Self { w, y, weight })
    }

    pub fn from_matched(matched: &MatchedDataset) -> Result<Self> {
        let ds = matched.source();
        let y = ds.outcome()?;
        let weight = matched.unit_weights();
        let keep: Vec<usize> = (0..ds.n_units()).filter(|&j| weight[j] > 0.0).collect();
        Ok(Self {
            w: keep.iter().map(|&j| ds.exposure()[j]).collect(),
            y: keep.iter().map(|&j| y[j]).collect(),
            weight: keep.iter().map(|&j| weight[j]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Caliper-window estimator: weighted quantile of the outcomes of matched
/// units with `|W_j - w| <= delta`, weights `K_j * u_j`.
pub fn qerf_empirical(matched: &MatchedDataset, w: f64, tau: f64) -> Result<f64> {
    let sample = WeightedSample::from_matched(matched)?;
    empirical_at(&sample, matched.delta(), w, tau)
}

fn empirical_at(sample: &WeightedSample, delta: f64, w: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let (vals, wts): (Vec<f64>, Vec<f64>) = (0..sample.len())
        .filter(|&j| (sample.w[j] - w).abs() <= delta)
        .map(|j| (sample.y[j], sample.weight[j]))
        .unzip();
    if vals.is_empty() {
        return Err(Error::EmptyWindow { w });
    }
    weighted_quantile(&vals, &wts, tau)
}

/// [`qerf_empirical`] over a grid; empty windows give `NaN`.
pub fn qerf_empirical_curve(matched: &MatchedDataset, grid: &[f64], tau: f64) -> Result<QuantileCurve> {
    check_grid(grid)?;
    let sample = WeightedSample::from_matched(matched)?;
    let est = grid
        .iter()
        .map(|&w| match empirical_at(&sample, matched.delta(), w, tau) {
            Ok(v) => Ok(v),
            Err(Error::EmptyWindow { .. }) => Ok(f64::NAN),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    QuantileCurve::new(tau, grid.to_vec(), est, CurveKind::Empirical)
}

/// Yu-Jones adjustment `{tau (1 - tau) / phi(Phi^-1(tau))^2}^(1/5)`.
pub fn bandwidth_factor(tau: f64) -> f64 {
    let d = norm_pdf(norm_inv_cdf(tau));
    (tau * (1.0 - tau) / (d * d)).powf(0.2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSpec {
    pub h_mean: f64,
    pub h_tau: f64,
    pub tau: f64,
}

pub fn adjust_bandwidth(h_mean: f64, tau: f64) -> Result<BandwidthSpec> {
    check_tau(tau)?;
    if !(h_mean > 0.0 && h_mean.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h_mean}")));
    }
    Ok(BandwidthSpec { h_mean, h_tau: h_mean * bandwidth_factor(tau), tau })
}

/// Kernel-weighted quantile at each grid point with weights
/// `weight_j * phi((W_j - w) / h)`. `ln_weight` holds `ln(weight_j)` so that
/// extreme weights do not overflow; `-inf` drops a unit.
pub fn kernel_quantile(
    w: &[f64],
    y: &[f64],
    ln_weight: &[f64],
    grid: &[f64],
    tau: f64,
    h: f64,
) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}")));
    }
    let mut order: Vec<usize> = (0..w.len()).filter(|&j| ln_weight[j] > f64::NEG_INFINITY).collect();
    if order.is_empty() {
        return Err(Error::ZeroTotalWeight);
    }
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let sw: Vec<f64> = order.iter().map(|&j| w[j]).collect();
    let sy: Vec<f64> = order.iter().map(|&j| y[j]).collect();
    let sl: Vec<f64> = order.iter().map(|&j| ln_weight[j]).collect();
    grid.par_iter()
        .map(|&g| {
            let lw: Vec<f64> = sw.iter().zip(&sl).map(|(&x, &l)| l + norm_ln_pdf((x - g) / h)).collect();
            let top = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            quantile_sorted(sy.iter().zip(&lw).map(|(&v, &l)| (v, (l - top).exp())), tau)
        })
        .collect()
}

/// Smoothed estimator: Gaussian-kernel weighted quantile over all matched
/// units with weights `K_j * u_j * phi((W_j - w) / h_tau)`.
pub fn qerf_smooth(matched: &MatchedDataset, grid: &[f64], tau: f64, h: BandwidthSpec) -> Result<QuantileCurve> {
    let sample = WeightedSample::from_matched(matched)?;
    qerf_smooth_sample(&sample, grid, tau, h)
}

pub fn qerf_smooth_sample(sample: &WeightedSample, grid: &[f64], tau: f64, h: BandwidthSpec) -> Result<QuantileCurve> {
    check_grid(grid)?;
    if sample.is_empty() {
        return Err(Error::ZeroTotalWeight);
    }
    let ln_w: Vec<f64> = sample.weight.iter().map(|v| v.ln()).collect();
    let est = kernel_quantile(&sample.w, &sample.y, &ln_w, grid, tau, h.h_tau)?;
    QuantileCurve::new(tau, grid.to_vec(), est, CurveKind::Smoothed)
}

/// Twenty log-spaced candidates between `span / 100` and `span`.
pub fn default_bandwidth_grid(span: f64) -> Vec<f64> {
    logspace(span / 100.0, span, 20)
}

/// Kernel terms smaller than `exp(-CV_SLACK)` times the smallest unit weight
/// are dropped in cross-validation.
const CV_SLACK: f64 = 50.0;

/// Leave-one-out cross-validation score of the local-constant
/// (Nadaraya-Watson) mean fit for each bandwidth. Points are weighted by
/// `weight` both in the fit and in the score. Only points with exposure in
/// `eval_window` are scored; all points act as neighbours. `None` marks a
/// bandwidth whose every fold is degenerate.
pub fn loo_cv_scores(
    sample: &WeightedSample,
    h_grid: &[f64],
    eval_window: Option<(f64, f64)>,
) -> Vec<Option<f64>> {
    let ln_w: Vec<f64> = sample.weight.iter().map(|v| v.ln()).collect();
    loo_cv_scores_ln(&sample.w, &sample.y, &ln_w, h_grid, eval_window)
}

/// [`loo_cv_scores`] with log-scale weights, for weights whose range
/// overflows linear arithmetic. `-inf` drops a point.
pub fn loo_cv_scores_ln(
    w: &[f64],
    y: &[f64],
    ln_weight: &[f64],
    h_grid: &[f64],
    eval_window: Option<(f64, f64)>,
) -> Vec<Option<f64>> {
    let mut order: Vec<usize> = (0..w.len()).filter(|&j| ln_weight[j] > f64::NEG_INFINITY).collect();
    order.sort_by(|&a, &b| w[a].total_cmp(&w[b]));
    let x: Vec<f64> = order.iter().map(|&j| w[j]).collect();
    let y: Vec<f64> = order.iter().map(|&j| y[j]).collect();
    let la: Vec<f64> = order.iter().map(|&j| ln_weight[j]).collect();
    let scored: Vec<usize> = (0..x.len())
        .filter(|&i| eval_window.is_none_or(|(lo, hi)| x[i] >= lo && x[i] <= hi))
        .collect();
    let (la_min, la_max) = la.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let score_top = scored.iter().map(|&i| la[i]).fold(f64::NEG_INFINITY, f64::max);
    // Beyond this many bandwidths no kernel term can matter.
    let reach_z = (2.0 * (la_max - la_min + CV_SLACK)).sqrt();

    h_grid
        .par_iter()
        .map(|&h| {
            if !(h > 0.0) {
                return None;
            }
            let reach = reach_z * h;
            let mut terms: Vec<f64> = Vec::new();
            let (mut num, mut den) = (0.0, 0.0);
            for &i in &scored {
                let lo = x.partition_point(|&v| v < x[i] - reach);
                let hi = x.partition_point(|&v| v <= x[i] + reach);
                let mut fit = |range: std::ops::Range<usize>| {
                    terms.clear();
                    let mut top = f64::NEG_INFINITY;
                    for j in range.clone() {
                        let z = (x[j] - x[i]) / h;
                        let t = if j == i { f64::NEG_INFINITY } else { la[j] - 0.5 * z * z };
                        top = top.max(t);
                        terms.push(t);
                    }
                    let (mut s, mut sy) = (0.0, 0.0);
                    if top > f64::NEG_INFINITY {
                        for (t, j) in terms.iter().zip(range) {
                            let k = (t - top).exp();
                            s += k;
                            sy += k * y[j];
                        }
                    }
                    (s, sy)
                };
                let (mut s, mut sy) = fit(lo..hi);
                if !(s > 0.0) {
                    (s, sy) = fit(0..x.len());
                }
                if s > 0.0 {
                    let r = y[i] - sy / s;
                    let a = (la[i] - score_top).exp();
                    num += a * r * r;
                    den += a;
                }
            }
            (den > 0.0).then(|| num / den)
        })
        .collect()
}

/// Grid minimizer of [`loo_cv_scores`]; ties go to the smaller bandwidth.
pub fn select_bandwidth(sample: &WeightedSample, h_grid: &[f64], eval_window: Option<(f64, f64)>) -> Result<f64> {
    let ln_w: Vec<f64> = sample.weight.iter().map(|v| v.ln()).collect();
    select_bandwidth_ln(&sample.w, &sample.y, &ln_w, h_grid, eval_window)
}

/// [`select_bandwidth`] with log-scale weights.
pub fn select_bandwidth_ln(
    w: &[f64],
    y: &[f64],
    ln_weight: &[f64],
    h_grid: &[f64],
    eval_window: Option<(f64, f64)>,
) -> Result<f64> {
    if h_grid.is_empty() {
        return Err(Error::InvalidArgument("bandwidth grid is empty".into()));
    }
    if ln_weight.iter().filter(|&&v| v > f64::NEG_INFINITY).count() < 3 {
        return Err(Error::InvalidArgument("need at least three weighted units".into()));
    }
    let scores = loo_cv_scores_ln(w, y, ln_weight, h_grid, eval_window);
    let mut best: Option<(f64, f64)> = None;
    for (&h, s) in h_grid.iter().zip(&scores) {
        let Some(s) = *s else { continue };
        if best.is_none_or(|(bh, bs)| s < bs || (s == bs && h < bh)) {
            best = Some((h, s));
        }
    }
    best.map(|b| b.0).ok_or(Error::AllCandidatesDegenerate)
}

/// Bandwidth for the conditional-mean fit on the matched set.
pub fn select_bandwidth_mean(
    matched: &MatchedDataset,
    h_grid: &[f64],
    eval_window: Option<(f64, f64)>,
) -> Result<f64> {
    select_bandwidth(&WeightedSample::from_matched(matched)?, h_grid, eval_window)
}

/// `q(w) - q(w')` from the caliper-window estimator.
pub fn qee_empirical(matched: &MatchedDataset, w: f64, w_prime: f64, tau: f64) -> Result<f64> {
    Ok(qerf_empirical(matched, w, tau)? - qerf_empirical(matched, w_prime, tau)?)
}

/// `q^S(w) - q^S(w')` from the smoothed estimator with one bandwidth.
pub fn qee_smooth(matched: &MatchedDataset, w: f64, w_prime: f64, tau: f64, h: BandwidthSpec) -> Result<f64> {
    let sample = WeightedSample::from_matched(matched)?;
    let ln_w: Vec<f64> = sample.weight.iter().map(|v| v.ln()).collect();
    let q = kernel_quantile(&sample.w, &sample.y, &ln_w, &[w, w_prime], tau, h.h_tau);
    // `kernel_quantile` takes any points; only the curve type demands order.
    let q = q?;
    Ok(q[0] - q[1])
}

/// Quantiles of several levels at once (levels must be increasing).
pub fn weighted_quantiles(values: &[f64], weights: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
    for &t in taus {
        check_tau(t)?;
    }
    if taus.windows(2).any(|p| p[1] < p[0]) {
        return Err(Error::InvalidArgument("quantile levels must be sorted".into()));
    }
    let mut pairs: Vec<(f64, f64)> = values.iter().copied().zip(weights.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    quantiles_sorted(&pairs, taus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ObservationalDataset;
    use crate::gps::GpsModel;
    use crate::matching::{match_templates, MatchConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn loss(v: &[f64], w: &[f64], q: f64, tau: f64) -> f64 {
        v.iter().zip(w).map(|(&y, &a)| a * check_loss(y - q, tau)).sum()
    }

    #[test]
    fn weighted_quantile_examples() {
        assert_eq!(weighted_quantile(&[1.0, 2.0, 3.0], &[1.0; 3], 0.5).unwrap(), 2.0);
        assert_eq!(weighted_quantile(&[0.0, 10.0], &[3.0, 1.0], 0.5).unwrap(), 0.0);
        // Loss is flat on [2, 3]; the left endpoint is returned.
        assert_eq!(weighted_quantile(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4], 0.5).unwrap(), 2.0);
        let grid: Vec<f64> = (0..=500).map(|i| i as f64 * 0.01).collect();
        let v = [1.0, 2.0, 3.0, 4.0];
        let best = grid.iter().map(|&q| loss(&v, &[1.0; 4], q, 0.5)).fold(f64::MAX, f64::min);
        assert_abs_diff_eq!(loss(&v, &[1.0; 4], 2.0, 0.5), best, epsilon = 1e-12);
        assert!(loss(&v, &[1.0; 4], 1.99, 0.5) > best);
    }

    #[test]
    fn weighted_quantile_errors() {
        assert!(matches!(weighted_quantile(&[1.0, 2.0], &[0.0, 0.0], 0.5), Err(Error::ZeroTotalWeight)));
        assert!(matches!(weighted_quantile(&[1.0], &[1.0], 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(weighted_quantile(&[1.0], &[1.0], 0.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn several_levels_agree_with_single() {
        let v = [3.0, -1.0, 2.5, 7.0, 0.0, 2.5];
        let w = [1.0, 0.5, 2.0, 0.25, 3.0, 1.0];
        let taus = [0.05, 0.3, 0.5, 0.77, 0.99];
        let all = weighted_quantiles(&v, &w, &taus).unwrap();
        for (t, q) in taus.iter().zip(all) {
            assert_eq!(q, weighted_quantile(&v, &w, *t).unwrap());
        }
    }

    #[test]
    fn bandwidth_constants() {
        assert_abs_diff_eq!(adjust_bandwidth(1.0, 0.5).unwrap().h_tau, 1.094_52, epsilon = 1e-5);
        assert_abs_diff_eq!(adjust_bandwidth(1.0, 0.1).unwrap().h_tau, 1.239_19, epsilon = 1e-5);
        assert_abs_diff_eq!(bandwidth_factor(0.9), bandwidth_factor(0.1), epsilon = 1e-12);
        assert_abs_diff_eq!(adjust_bandwidth(2.0, 0.3).unwrap().h_tau, 2.0 * bandwidth_factor(0.3), epsilon = 1e-12);
    }

    #[test]
    fn factor_minimal_at_median() {
        let f5 = bandwidth_factor(0.5);
        for i in 1..100 {
            let t = i as f64 / 100.0;
            assert!(bandwidth_factor(t) >= f5 - 1e-12);
            assert!(bandwidth_factor(t) > 1.0);
        }
    }

    /// A small matched set: exposures spread on [0, 10], outcome = w + noise.
    fn matched_fixture(ds: &ObservationalDataset) -> MatchedDataset<'_> {
        let gps = GpsModel::new(5.0, vec![1.0], 3.0).unwrap();
        match_templates(ds, &gps, MatchConfig::new(1.0, 0.5).unwrap()).unwrap()
    }

    fn fixture_ds(n: usize, seed: u64) -> ObservationalDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let c: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let y: Vec<f64> = w.iter().map(|&x| x + rng.random_range(-1.0..1.0)).collect();
        ObservationalDataset::new(w, c, Some(y), vec!["c1".into()]).unwrap()
    }

    #[test]
    fn empirical_window_point_mass_and_order() {
        let ds = fixture_ds(60, 4);
        let m = matched_fixture(&ds);
        let lo = qerf_empirical(&m, 5.0, 0.1).unwrap();
        let hi = qerf_empirical(&m, 5.0, 0.9).unwrap();
        assert!(lo <= hi);
        assert!(matches!(qerf_empirical(&m, 50.0, 0.5), Err(Error::EmptyWindow { .. })));

        let single = WeightedSample::new(vec![2.0], vec![7.0], vec![3.0]).unwrap();
        for tau in [0.1, 0.5, 0.9] {
            assert_eq!(empirical_at(&single, 0.5, 2.2, tau).unwrap(), 7.0);
        }
        let two = WeightedSample::new(vec![1.0, 1.1], vec![0.0, 10.0], vec![3.0, 1.0]).unwrap();
        assert_eq!(empirical_at(&two, 0.5, 1.0, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn smooth_with_huge_bandwidth_is_flat_global_quantile() {
        let ds = fixture_ds(80, 9);
        let m = matched_fixture(&ds);
        let s = WeightedSample::from_matched(&m).unwrap();
        let h = adjust_bandwidth(1e6 * 10.0, 0.5).unwrap();
        let grid = [1.0, 4.0, 9.0];
        let c = qerf_smooth(&m, &grid, 0.5, h).unwrap();
        let global = weighted_quantile(&s.y, &s.weight, 0.5).unwrap();
        assert!(c.estimate.iter().all(|&v| v == global));
        assert_eq!(c.kind, CurveKind::Smoothed);
    }

    #[test]
    fn smooth_single_unit_and_far_grid() {
        let s = WeightedSample::new(vec![3.0], vec![-2.0], vec![4.0]).unwrap();
        let h = adjust_bandwidth(0.1, 0.3).unwrap();
        let c = qerf_smooth_sample(&s, &[-100.0, 3.0, 100.0], 0.3, h).unwrap();
        assert_eq!(c.estimate, vec![-2.0; 3]);
    }

    #[test]
    fn qee_identities() {
        let ds = fixture_ds(80, 2);
        let m = matched_fixture(&ds);
        let h = adjust_bandwidth(1.0, 0.5).unwrap();
        assert_eq!(qee_smooth(&m, 4.0, 4.0, 0.5, h).unwrap(), 0.0);
        assert_eq!(qee_empirical(&m, 4.0, 4.0, 0.5).unwrap(), 0.0);
        let a = qee_smooth(&m, 3.0, 6.0, 0.5, h).unwrap();
        let b = qee_smooth(&m, 6.0, 3.0, 0.5, h).unwrap();
        assert_eq!(a, -b);
        let a = qee_empirical(&m, 3.0, 6.0, 0.25).unwrap();
        let b = qee_empirical(&m, 6.0, 3.0, 0.25).unwrap();
        assert_eq!(a, -b);
    }

    /// Direct O(n^2) leave-one-out score without truncation.
    fn cv_oracle(w: &[f64], y: &[f64], h: f64) -> f64 {
        let n = w.len();
        let mut total = 0.0;
        for i in 0..n {
            let (mut s, mut sy) = (0.0, 0.0);
            for j in 0..n {
                if i != j {
                    let k = (-0.5 * ((w[j] - w[i]) / h).powi(2)).exp();
                    s += k;
                    sy += k * y[j];
                }
            }
            total += (y[i] - sy / s).powi(2);
        }
        total / n as f64
    }

    #[test]
    fn cv_interior_minimum_on_noisy_line() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = 200;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = w.iter().map(|&x| x + 0.2 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let grid = default_bandwidth_grid(1.0);
        let oracle: Vec<f64> = grid.iter().map(|&h| cv_oracle(&w, &y, h)).collect();
        let best = (0..grid.len()).min_by(|&a, &b| oracle[a].total_cmp(&oracle[b])).unwrap();
        assert!(best > 0 && best + 1 < grid.len(), "oracle minimum at {best}");

        let s = WeightedSample::new(w, y, vec![1.0; n]).unwrap();
        let scores = loo_cv_scores(&s, &grid, None);
        for (a, b) in scores.iter().zip(&oracle) {
            assert_abs_diff_eq!(a.unwrap(), *b, epsilon = 1e-10 * b.abs());
        }
        assert_eq!(select_bandwidth(&s, &grid, None).unwrap(), grid[best]);
    }

    #[test]
    fn bandwidth_trivial_grids() {
        let s = WeightedSample::new(vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 0.0, 2.0, 1.0], vec![1.0; 4]).unwrap();
        assert_eq!(select_bandwidth(&s, &[0.7], None).unwrap(), 0.7);
        assert_eq!(select_bandwidth(&s, &[0.7, 0.7], None).unwrap(), 0.7);
        let tiny = WeightedSample::new(vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0; 2]).unwrap();
        assert!(select_bandwidth(&tiny, &[0.7], None).is_err());
    }

    proptest! {
        #[test]
        fn quantile_minimizes_check_loss(
            pairs in proptest::collection::vec((-100.0f64..100.0, 0.0f64..5.0), 1..40),
            tau in 0.01f64..0.99,
        ) {
            let (v, w): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assume!(w.iter().sum::<f64>() > 0.0);
            let q = weighted_quantile(&v, &w, tau).unwrap();
            let lo = v.iter().cloned().fold(f64::MAX, f64::min);
            let hi = v.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!(q >= lo && q <= hi);
            let lq = loss(&v, &w, q, tau);
            for &c in &v {
                prop_assert!(lq <= loss(&v, &w, c, tau) + 1e-9 * (1.0 + lq.abs()));
            }
        }

        #[test]
        fn quantile_monotone_equivariant_and_split_invariant(
            pairs in proptest::collection::vec((-50.0f64..50.0, 0.1f64..5.0), 1..30),
            t1 in 0.01f64..0.99, t2 in 0.01f64..0.99,
            a in 0.1f64..10.0, b in -20.0f64..20.0, dup in 0usize..30,
        ) {
            let (v, w): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(weighted_quantile(&v, &w, lo).unwrap() <= weighted_quantile(&v, &w, hi).unwrap());

            let q = weighted_quantile(&v, &w, t1).unwrap();
            let moved: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let qm = weighted_quantile(&moved, &w, t1).unwrap();
            prop_assert!((qm - (a * q + b)).abs() <= 1e-9 * (1.0 + qm.abs()));

            // Split one unit into two halves.
            let k = dup % v.len();
            let mut v2 = v.clone();
            let mut w2 = w.clone();
            w2[k] *= 0.5;
            v2.push(v[k]);
            w2.push(w2[k]);
            prop_assert_eq!(weighted_quantile(&v2, &w2, t1).unwrap(), q);
        }

        #[test]
        fn smooth_curve_is_continuous(seed in 0u64..1000, at in 1.0f64..9.0) {
            let ds = fixture_ds(50, seed);
            let m = matched_fixture(&ds);
            let h = adjust_bandwidth(1.5, 0.5).unwrap();
            let eps = 1e-6 * 10.0;
            let c = qerf_smooth(&m, &[at, at + eps], 0.5, h).unwrap();
            let s = WeightedSample::from_matched(&m).unwrap();
            // Jumps, when any, are between adjacent order statistics; with a
            // tiny step the weighted CDF barely moves, so the estimate stays put
            // unless it sits on a knife edge.
            let gap = s.y.iter().cloned().fold(0.0f64, |acc, v| acc.max(v.abs()));
            prop_assert!((c.estimate[1] - c.estimate[0]).abs() <= 2.0 * gap);
            prop_assert!(c.estimate.iter().all(|v| v.is_finite()));
        }
    }
}
