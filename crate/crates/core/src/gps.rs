//! Linear-Gaussian generalized propensity score and the marginal exposure
//! density used to stabilize inverse weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::ObservationalDataset;
use crate::error::{Error, Result};
use crate::stats::{norm_ln_pdf, norm_pdf, silverman_bandwidth};

/// `W | C ~ N(intercept + C . coefficients, residual_sd^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub residual_sd: f64,
}

impl GpsModel {
    pub fn new(intercept: f64, coefficients: Vec<f64>, residual_sd: f64) -> Result<Self> {
        if !(residual_sd > 0.0 && residual_sd.is_finite()) {
            return Err(Error::DegenerateResidual);
        }
        Ok(Self { intercept, coefficients, residual_sd })
    }

    /// Conditional mean of the exposure.
    pub fn mean(&self, c: &[f64]) -> Result<f64> {
        if c.len() != self.coefficients.len() {
            return Err(Error::DimensionMismatch { expected: self.coefficients.len(), got: c.len() });
        }
        Ok(self.intercept + c.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Conditional means for every unit of `ds`.
    pub fn means(&self, ds: &ObservationalDataset) -> Result<Vec<f64>> {
        (0..ds.n_units()).map(|i| self.mean(ds.covariate_row(i))).collect()
    }

    /// Density at `w` given the conditional mean.
    #[inline]
    pub fn density_at(&self, w: f64, mean: f64) -> f64 {
        norm_pdf((w - mean) / self.residual_sd) / self.residual_sd
    }

    #[inline]
    pub fn ln_density_at(&self, w: f64, mean: f64) -> f64 {
        norm_ln_pdf((w - mean) / self.residual_sd) - self.residual_sd.ln()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: GpsModel = serde_json::from_str(text)?;
        GpsModel::new(m.intercept, m.coefficients, m.residual_sd)
    }
}

/// Weighted least squares of exposure on covariates with an intercept. The
/// residual scale uses the total weight as denominator (the ML estimate).
pub fn fit_linear_gps(ds: &ObservationalDataset) -> Result<GpsModel> {
    let n = ds.n_units();
    let q = ds.n_covariates();
    let p = q + 1;
    if n <= p {
        return Err(Error::RankDeficientDesign);
    }
    let u = ds.unit_weight();
    let x = DMatrix::from_fn(n, p, |i, j| {
        let s = u[i].sqrt();
        if j == 0 {
            s
        } else {
            s * ds.covariate_row(i)[j - 1]
        }
    });
    let y = DVector::from_iterator(n, (0..n).map(|i| u[i].sqrt() * ds.exposure()[i]));

    let svd = x.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let tol = s_max * (n.max(p) as f64) * f64::EPSILON * 16.0;
    if !(s_max > 0.0) || svd.singular_values.iter().any(|&s| s <= tol) {
        return Err(Error::RankDeficientDesign);
    }
    let beta = svd.solve(&y, tol).map_err(|_| Error::RankDeficientDesign)?;
    let resid = &y - &x * &beta;
    let total: f64 = u.iter().sum();
    let residual_sd = (resid.norm_squared() / total).sqrt();

    let scale = ds.exposure().iter().fold(1.0_f64, |a, w| a.max(w.abs()));
    if !(residual_sd > 1e-10 * scale) {
        return Err(Error::DegenerateResidual);
    }
    Ok(GpsModel {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        residual_sd,
    })
}

/// Normal density of `w` under the fitted exposure model given covariates `c`.
pub fn evaluate_gps(m: &GpsModel, w: f64, c: &[f64]) -> Result<f64> {
    Ok(m.density_at(w, m.mean(c)?))
}

/// Gaussian kernel density estimate of the marginal exposure density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalDensity {
    pub sample: Vec<f64>,
    /// Normalized to sum to one.
    pub weights: Vec<f64>,
    pub bandwidth: f64,
}

impl MarginalDensity {
    pub fn new(sample: Vec<f64>, weights: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::DegenerateSample);
        }
        if weights.len() != sample.len() {
            return Err(Error::DimensionMismatch { expected: sample.len(), got: weights.len() });
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument("bandwidth must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ZeroTotalWeight);
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Self { sample, weights, bandwidth })
    }
}

/// Silverman-bandwidth KDE of the exposure, weighted by unit weight.
pub fn fit_marginal_density(ds: &ObservationalDataset) -> Result<MarginalDensity> {
    let h = silverman_bandwidth(ds.exposure(), ds.unit_weight()).ok_or(Error::DegenerateSample)?;
    MarginalDensity::new(ds.exposure().to_vec(), ds.unit_weight().to_vec(), h)
}

/// Same as [`fit_marginal_density`] on a bare sample with equal weights.
pub fn fit_marginal_density_sample(sample: &[f64]) -> Result<MarginalDensity> {
    let w = vec![1.0; sample.len()];
    let h = silverman_bandwidth(sample, &w).ok_or(Error::DegenerateSample)?;
    MarginalDensity::new(sample.to_vec(), w, h)
}

pub fn evaluate_marginal(md: &MarginalDensity, w: f64) -> f64 {
    let h = md.bandwidth;
    md.sample
        .iter()
        .zip(&md.weights)
        .map(|(&x, &p)| p * norm_pdf((w - x) / h))
        .sum::<f64>()
        / h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::simpson;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn ds_from(w: Vec<f64>, c: Vec<Vec<f64>>) -> ObservationalDataset {
        let q = c[0].len();
        let names = (0..q).map(|k| format!("c{}", k + 1)).collect();
        ObservationalDataset::new(w, c, None, names).unwrap()
    }

    #[test]
    fn constant_exposure_is_degenerate() {
        let ds = ds_from(vec![5.0; 6], (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect());
        assert!(matches!(fit_linear_gps(&ds), Err(Error::DegenerateResidual)));
    }

    #[test]
    fn exact_linear_fit_is_degenerate() {
        let c: Vec<f64> = vec![0.5, 1.0, -2.0, 3.0, 4.5];
        let ds = ds_from(c.iter().map(|v| 2.0 * v).collect(), c.iter().map(|&v| vec![v]).collect());
        assert!(matches!(fit_linear_gps(&ds), Err(Error::DegenerateResidual)));
    }

    #[test]
    fn collinear_design_rejected() {
        let ds = ds_from(
            vec![1.0, 3.0, 2.0, 5.0, 4.0],
            (0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect(),
        );
        assert!(matches!(fit_linear_gps(&ds), Err(Error::RankDeficientDesign)));
    }

    #[test]
    fn recovers_known_line() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 4000;
        let c: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w: Vec<f64> = c
            .iter()
            .map(|&x| 1.0 + 0.5 * x + 2.0 * { let z: f64 = StandardNormal.sample(&mut rng); z })
            .collect();
        let m = fit_linear_gps(&ds_from(w, c.iter().map(|&v| vec![v]).collect())).unwrap();
        assert_abs_diff_eq!(m.intercept, 1.0, epsilon = 0.1);
        assert_abs_diff_eq!(m.coefficients[0], 0.5, epsilon = 0.1);
        assert_abs_diff_eq!(m.residual_sd, 2.0, epsilon = 0.1);
    }

    #[test]
    fn gps_values() {
        let m = GpsModel::new(0.0, vec![0.0], 1.0).unwrap();
        assert_abs_diff_eq!(evaluate_gps(&m, 0.0, &[3.0]).unwrap(), 0.398_942_3, epsilon = 1e-7);
        assert_abs_diff_eq!(evaluate_gps(&m, 1.96, &[3.0]).unwrap(), 0.058_44, epsilon = 1e-5);
        let m2 = GpsModel::new(1.0, vec![2.0], 2.0).unwrap();
        assert_abs_diff_eq!(evaluate_gps(&m2, 7.0, &[3.0]).unwrap(), 0.199_471_1, epsilon = 1e-7);
        assert!(matches!(evaluate_gps(&m, 0.0, &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn model_json_round_trip() {
        let m = GpsModel::new(-0.8, vec![0.1, -0.1], 5.0).unwrap();
        assert_eq!(GpsModel::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    #[test]
    fn marginal_degenerate() {
        assert!(matches!(fit_marginal_density_sample(&[0.0]), Err(Error::DegenerateSample)));
        assert!(matches!(fit_marginal_density_sample(&[2.0, 2.0]), Err(Error::DegenerateSample)));
    }

    #[test]
    fn marginal_of_standard_normal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let md = fit_marginal_density_sample(&x).unwrap();
        let at0 = evaluate_marginal(&md, 0.0);
        assert!((0.36..=0.44).contains(&at0), "{at0}");
        let max = x.iter().cloned().fold(f64::MIN, f64::max);
        assert!(evaluate_marginal(&md, max + 10.0) < 1e-4);
        let lo = x.iter().cloned().fold(f64::MAX, f64::min) - 10.0 * md.bandwidth;
        let hi = max + 10.0 * md.bandwidth;
        let mass = simpson(|w| evaluate_marginal(&md, w), lo, hi, 4000);
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-3);
    }

    proptest! {
        #[test]
        fn gps_positive_and_normalized(
            b0 in -5.0f64..5.0, b1 in -3.0f64..3.0, sd in 0.05f64..10.0,
            c in -4.0f64..4.0, z in -30.0f64..30.0,
        ) {
            let m = GpsModel::new(b0, vec![b1], sd).unwrap();
            let mu = m.mean(&[c]).unwrap();
            prop_assert!(evaluate_gps(&m, mu + z * sd, &[c]).unwrap() > 0.0);
            let mass = simpson(|w| m.density_at(w, mu), mu - 8.0 * sd, mu + 8.0 * sd, 2000);
            prop_assert!((mass - 1.0).abs() < 1e-6);
        }

        #[test]
        fn marginal_nonnegative(xs in proptest::collection::vec(-10.0f64..10.0, 3..40), w in -50.0f64..50.0) {
            if let Ok(md) = fit_marginal_density_sample(&xs) {
                prop_assert!(evaluate_marginal(&md, w) >= 0.0);
            }
        }
    }
}
