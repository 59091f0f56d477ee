//! Small numerical helpers shared across modules.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::quantile::weighted_quantile;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
#[inline]
pub fn norm_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

#[inline]
pub fn norm_ln_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// Standard normal quantile function.
pub fn norm_inv_cdf(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn weighted_mean(x: &[f64], w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total
}

/// Weighted variance with total-weight denominator.
pub fn weighted_variance(x: &[f64], w: &[f64]) -> f64 {
    let m = weighted_mean(x, w);
    let total: f64 = w.iter().sum();
    x.iter().zip(w).map(|(a, b)| b * (a - m).powi(2)).sum::<f64>() / total
}

/// Kish effective sample size `(sum w)^2 / sum w^2`.
pub fn effective_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// Weighted Pearson correlation. Returns `None` when `x` has no spread; a
/// constant `y` yields `Some(0.0)`.
pub fn weighted_correlation(x: &[f64], y: &[f64], w: &[f64]) -> Option<f64> {
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mx = weighted_mean(x, w);
    let my = weighted_mean(y, w);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for ((a, b), c) in x.iter().zip(y).zip(w) {
        let dx = a - mx;
        let dy = b - my;
        sxx += c * dx * dx;
        syy += c * dy * dy;
        sxy += c * dx * dy;
    }
    if sxx <= f64::EPSILON * total * mx.abs().max(1.0).powi(2) {
        return None;
    }
    if syy <= f64::EPSILON * total * my.abs().max(1.0).powi(2) {
        return Some(0.0);
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Silverman's rule of thumb `0.9 min(sd, IQR/1.34) n^(-1/5)` on a weighted
/// sample. `n` is the Kish effective size. Returns `None` for a sample
/// without spread.
pub fn silverman_bandwidth(x: &[f64], w: &[f64]) -> Option<f64> {
    if x.is_empty() {
        return None;
    }
    let sd = weighted_variance(x, w).sqrt();
    if !(sd > 0.0) {
        return None;
    }
    let q1 = weighted_quantile(x, w, 0.25).ok()?;
    let q3 = weighted_quantile(x, w, 0.75).ok()?;
    let iqr = (q3 - q1) / 1.34;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    let n = effective_size(w).max(1.0);
    Some(0.9 * spread * n.powf(-0.2))
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
                .collect()
        }
    }
}

pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    linspace(lo.ln(), hi.ln(), n)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 1 { n + 1 } else { n };
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + h * i as f64;
        s += if i % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
    }
    s * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normal_density_values() {
        assert_abs_diff_eq!(norm_pdf(0.0), 0.398_942_3, epsilon = 1e-7);
        assert_abs_diff_eq!(norm_pdf(1.96), 0.058_440_94, epsilon = 1e-7);
        assert_abs_diff_eq!(norm_ln_pdf(1.3).exp(), norm_pdf(1.3), epsilon = 1e-15);
        assert_abs_diff_eq!(norm_inv_cdf(0.975), 1.959_964, epsilon = 1e-6);
    }

    #[test]
    fn correlation_conventions() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0; 4];
        assert_abs_diff_eq!(weighted_correlation(&x, &x, &w).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(weighted_correlation(&x, &[2.0; 4], &w), Some(0.0));
        assert_eq!(weighted_correlation(&[2.0; 4], &x, &w), None);
    }

    #[test]
    fn simpson_integrates_density() {
        let v = simpson(norm_pdf, -8.0, 8.0, 2000);
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn grids() {
        assert_eq!(linspace(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
        let g = logspace(0.01, 1.0, 3);
        assert_abs_diff_eq!(g[1], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(g[2], 1.0, epsilon = 1e-12);
    }
}
