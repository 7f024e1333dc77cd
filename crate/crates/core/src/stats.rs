//! Small statistics kit: estimates with standard errors, least-squares lines,
//! batch means and rank correlation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate<T> {
    pub mean: T,
    pub stderr: T,
}

impl<T: Scalar> Estimate<T> {
    /// How many standard errors `mean` lies below zero (positive means "negative by k stderr").
    pub fn sigmas_below_zero(&self) -> T {
        if self.stderr > T::zero() {
            -self.mean / self.stderr
        } else if self.mean < T::zero() {
            T::infinity()
        } else {
            T::zero()
        }
    }
}

pub fn mean<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    xs.iter().copied().sum::<T>() / T::from_usize_lossy(xs.len())
}

/// Unbiased sample variance; zero for fewer than two samples.
pub fn sample_variance<T: Scalar>(xs: &[T]) -> T {
    if xs.len() < 2 {
        return T::zero();
    }
    let m = mean(xs);
    xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::from_usize_lossy(xs.len() - 1)
}

/// Mean with standard error `s / sqrt(n)`.
pub fn mean_estimate<T: Scalar>(xs: &[T]) -> Estimate<T> {
    let n = T::from_usize_lossy(xs.len().max(1));
    Estimate { mean: mean(xs), stderr: (sample_variance(xs) / n).sqrt() }
}

/// Means of `batches` contiguous, equal-length blocks (the tail remainder is dropped).
pub fn batch_means<T: Scalar>(xs: &[T], batches: usize) -> Vec<T> {
    if batches == 0 || xs.len() < batches {
        return Vec::new();
    }
    let len = xs.len() / batches;
    xs.chunks_exact(len).take(batches).map(mean).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit<T> {
    pub slope: T,
    pub intercept: T,
    pub r_squared: T,
    pub slope_stderr: T,
    pub intercept_stderr: T,
    pub points: usize,
}

/// Ordinary least squares `y = slope * x + intercept`. Standard errors come from
/// the residual variance (zero with only two points).
pub fn linear_fit<T: Scalar>(x: &[T], y: &[T]) -> Result<LinearFit<T>> {
    weighted_linear_fit(x, y, None)
}

/// Weighted least squares. With `sigma` given, weights are `1/sigma^2` and the
/// parameter standard errors are the known-noise ones, `sqrt(diag((X^T W X)^-1))`.
pub fn weighted_linear_fit<T: Scalar>(x: &[T], y: &[T], sigma: Option<&[T]>) -> Result<LinearFit<T>> {
    let n = x.len();
    if n != y.len() || sigma.is_some_and(|s| s.len() != n) {
        return Err(Error::Argument("fit inputs must have equal lengths".into()));
    }
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 points to fit a line, got {n}")));
    }
    let w: Vec<T> = match sigma {
        Some(s) => {
            if s.iter().any(|&v| v <= T::zero()) {
                return Err(Error::Argument("weighted fit needs positive sigmas".into()));
            }
            s.iter().map(|&v| T::one() / (v * v)).collect()
        }
        None => vec![T::one(); n],
    };
    let sw: T = w.iter().copied().sum();
    let mx = x.iter().zip(&w).map(|(&a, &b)| a * b).sum::<T>() / sw;
    let my = y.iter().zip(&w).map(|(&a, &b)| a * b).sum::<T>() / sw;
    let sxx: T = x.iter().zip(&w).map(|(&a, &b)| b * (a - mx) * (a - mx)).sum();
    let span = x.iter().fold(T::zero(), |m, &v| m.max((v - mx).abs()));
    if sxx <= T::zero() || span <= T::lit(1e-300) {
        return Err(Error::Argument("degenerate x-range: all abscissae coincide".into()));
    }
    let sxy: T = x.iter().zip(y).zip(&w).map(|((&a, &b), &c)| c * (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: T = x
        .iter()
        .zip(y)
        .zip(&w)
        .map(|((&a, &b), &c)| {
            let r = b - slope * a - intercept;
            c * r * r
        })
        .sum();
    let ss_tot: T = y.iter().zip(&w).map(|(&b, &c)| c * (b - my) * (b - my)).sum();
    let r_squared = if ss_tot > T::zero() { T::one() - ss_res / ss_tot } else { T::one() };
    // Known-noise covariance when weighted; residual-scaled otherwise.
    let scale = match sigma {
        Some(_) => T::one(),
        None if n > 2 => ss_res / T::from_usize_lossy(n - 2),
        None => T::zero(),
    };
    let x2w: T = x.iter().zip(&w).map(|(&a, &c)| c * a * a).sum();
    let slope_stderr = (scale / sxx).sqrt();
    let intercept_stderr = (scale * x2w / (sw * sxx)).sqrt();
    Ok(LinearFit { slope, intercept, r_squared, slope_stderr, intercept_stderr, points: n })
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks<T: Scalar>(xs: &[T]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankCorrelation {
    pub rho: f64,
    /// Two-sided p-value from the t approximation with `n - 2` degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

pub fn spearman<T: Scalar>(x: &[T], y: &[T]) -> Result<RankCorrelation> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(Error::Argument(format!("spearman needs >= 3 paired samples, got {n}")));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(RankCorrelation { rho: 0.0, p_value: 1.0, n });
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(RankCorrelation { rho, p_value, n })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_has_unit_r_squared() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let fit = linear_fit(&x, &y).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept + 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0, 1.0], &[0.0, 2.0]).is_err());
    }

    #[test]
    fn known_noise_stderr_matches_closed_form() {
        // Two points with unit sigma: intercept variance = sum x^2 / (n * Sxx).
        let fit = weighted_linear_fit(&[0.0f64, 1.0], &[0.0, 1.0], Some(&[1.0, 1.0])).unwrap();
        assert!((fit.intercept_stderr - 1.0).abs() < 1e-12);
        assert!((fit.slope_stderr - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spearman_monotone_and_ties() {
        let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[9.0, 7.0, 5.0, 2.0, 0.0]).unwrap();
        assert_eq!(r.rho, -1.0);
        assert_eq!(r.p_value, 0.0);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
        // Textbook value: rho = 0.8 on n = 5 has two-sided p ~= 0.104.
        let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((r.rho - 0.8).abs() < 1e-12);
        assert!((r.p_value - 0.1041).abs() < 2e-3);
    }

    #[test]
    fn batch_means_drop_remainder() {
        assert_eq!(batch_means(&[1.0, 2.0, 3.0, 4.0, 5.0], 2), vec![1.5, 3.5]);
        assert!(batch_means::<f64>(&[1.0], 3).is_empty());
    }
}
