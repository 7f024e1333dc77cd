//! Canonical minimal-valley losses.
//!
//! A valley model lives directly in the coordinates where the loss reads
//!
//! ```text
//! L(theta) = L* + 1/2 * sum_{i < n} theta_i^2 * lambda_i(theta_hat)
//! ```
//!
//! with `theta_bar = theta[..n]` the non-degenerate block and
//! `theta_hat = theta[n..]` the coordinates along the valley floor.

mod curvature;
mod toys;

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use curvature::{AbsLinear, Constant, Curvature, FnCurvature, GaussianBump, QuadraticForm, Side};
pub use toys::ValleySpec;

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::scalar::{norm, Scalar};

/// A finite point in parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector<T>(Vec<T>);

impl<T: Scalar> ParamVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("parameter vector must have length >= 1".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("parameter {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> Deref for ParamVector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

/// Eigen-summary of a Hessian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport<T> {
    /// Ascending.
    pub eigenvalues: Vec<T>,
    pub trace: T,
    /// Product of the non-degenerate (positive) eigenvalues only.
    pub nondegenerate_det: T,
    /// `log(nondegenerate_det)`, summed in log space.
    pub log_det: T,
    pub negative_sum: T,
}

impl<T: Scalar> SpectrumReport<T> {
    /// Summarises a full eigenvalue list. Eigenvalues above `rank_tol * max|ev|`
    /// count as non-degenerate.
    pub fn from_eigenvalues(mut eigenvalues: Vec<T>, rank_tol: T) -> Self {
        eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let scale = eigenvalues.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let cut = rank_tol * scale;
        let positive: Vec<T> = eigenvalues.iter().copied().filter(|&v| v > cut).collect();
        Self {
            trace: eigenvalues.iter().copied().sum(),
            nondegenerate_det: positive.iter().fold(T::one(), |p, &v| p * v),
            log_det: positive.iter().map(|v| v.ln()).sum(),
            negative_sum: eigenvalues.iter().copied().filter(|&v| v < T::zero()).sum(),
            eigenvalues,
        }
    }
}

/// A canonical-form valley loss.
#[derive(Clone)]
pub struct ValleyModel<T: Scalar> {
    name: String,
    dim: usize,
    base_loss: T,
    curvatures: Vec<Arc<dyn Curvature<T>>>,
}

impl<T: Scalar> fmt::Debug for ValleyModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ValleyModel")
            .field("name", &self.name)
            .field("n", &self.curvatures.len())
            .field("dim", &self.dim)
            .field("base_loss", &self.base_loss)
            .finish()
    }
}

impl<T: Scalar> ValleyModel<T> {
    pub fn new(name: impl Into<String>, dim: usize, curvatures: Vec<Arc<dyn Curvature<T>>>) -> Result<Self> {
        if dim == 0 || curvatures.len() > dim {
            return Err(Error::Argument(format!(
                "need 1 <= dim and n <= dim (n = {}, dim = {dim})",
                curvatures.len()
            )));
        }
        Ok(Self { name: name.into(), dim, base_loss: T::zero(), curvatures })
    }

    pub fn with_base_loss(mut self, base_loss: T) -> Self {
        self.base_loss = base_loss;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of non-degenerate coordinates.
    pub fn n(&self) -> usize {
        self.curvatures.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degenerate_dim(&self) -> usize {
        self.dim - self.n()
    }

    pub fn base_loss(&self) -> T {
        self.base_loss
    }

    /// Whether every curvature profile has analytic derivatives.
    pub fn is_exact(&self) -> bool {
        self.curvatures.iter().all(|c| c.is_exact())
    }

    /// Splits a full parameter vector into `(theta_bar, theta_hat)`.
    pub fn split<'a>(&self, theta: &'a [T]) -> Result<(&'a [T], &'a [T])> {
        if theta.len() != self.dim {
            return Err(Error::Argument(format!(
                "{} expects {} parameters, got {}",
                self.name,
                self.dim,
                theta.len()
            )));
        }
        Ok(theta.split_at(self.n()))
    }

    fn check_hat(&self, hat: &[T]) -> Result<()> {
        if hat.len() != self.degenerate_dim() {
            return Err(Error::Argument(format!(
                "{} expects {} degenerate coordinates, got {}",
                self.name,
                self.degenerate_dim(),
                hat.len()
            )));
        }
        Ok(())
    }

    /// The floor point `(0, theta_hat)`.
    pub fn floor_point(&self, hat: &[T]) -> Result<Vec<T>> {
        self.check_hat(hat)?;
        let mut theta = vec![T::zero(); self.n()];
        theta.extend_from_slice(hat);
        Ok(theta)
    }

    /// `lambda_i(theta_hat)`, each checked to be strictly positive.
    pub fn lambdas(&self, hat: &[T]) -> Result<Vec<T>> {
        self.check_hat(hat)?;
        self.curvatures
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let v = c.value(hat)?;
                if v > T::zero() && v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Domain(format!("lambda_{i} = {v} is not positive at {hat:?}")))
                }
            })
            .collect()
    }

    /// `d lambda_i / d theta_hat` for each `i`.
    pub fn lambda_grads(&self, hat: &[T]) -> Result<Vec<Vec<T>>> {
        self.check_hat(hat)?;
        self.curvatures.iter().map(|c| c.gradient(hat)).collect()
    }

    pub fn lambda_hessians(&self, hat: &[T]) -> Result<Vec<DMatrix<T>>> {
        self.check_hat(hat)?;
        self.curvatures.iter().map(|c| c.hessian(hat)).collect()
    }

    pub fn loss(&self, theta: &[T]) -> Result<T> {
        let (bar, hat) = self.split(theta)?;
        let lambdas = self.lambdas(hat)?;
        let quad: T = bar.iter().zip(&lambdas).map(|(&x, &l)| x * x * l).sum();
        Ok(self.base_loss + T::lit(0.5) * quad)
    }

    pub fn gradient(&self, theta: &[T]) -> Result<Vec<T>> {
        let (bar, hat) = self.split(theta)?;
        let lambdas = self.lambdas(hat)?;
        let mut g: Vec<T> = bar.iter().zip(&lambdas).map(|(&x, &l)| x * l).collect();
        let mut g_hat = vec![T::zero(); hat.len()];
        if !hat.is_empty() {
            let half = T::lit(0.5);
            for (&x, grad_l) in bar.iter().zip(self.lambda_grads(hat)?) {
                let w = half * x * x;
                for (acc, d) in g_hat.iter_mut().zip(grad_l) {
                    *acc += w * d;
                }
            }
        }
        g.extend(g_hat);
        Ok(g)
    }

    /// Full `N x N` analytic Hessian, including the off-floor cross and
    /// degenerate blocks.
    pub fn hessian(&self, theta: &[T]) -> Result<DMatrix<T>> {
        let (bar, hat) = self.split(theta)?;
        let n = self.n();
        let lambdas = self.lambdas(hat)?;
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for i in 0..n {
            h[(i, i)] = lambdas[i];
        }
        if hat.is_empty() {
            return Ok(h);
        }
        let grads = self.lambda_grads(hat)?;
        let hessians = self.lambda_hessians(hat)?;
        let half = T::lit(0.5);
        for i in 0..n {
            for (k, &d) in grads[i].iter().enumerate() {
                let v = bar[i] * d;
                h[(i, n + k)] = v;
                h[(n + k, i)] = v;
            }
            let w = half * bar[i] * bar[i];
            if w != T::zero() {
                for r in 0..hat.len() {
                    for c in 0..hat.len() {
                        h[(n + r, n + c)] += w * hessians[i][(r, c)];
                    }
                }
            }
        }
        Ok(h)
    }

    /// Floor spectrum at `theta_hat`: the `lambda_i` plus `N - n` zeros.
    pub fn spectrum(&self, hat: &[T]) -> Result<SpectrumReport<T>> {
        let lambdas = self.lambdas(hat)?;
        let mut eigenvalues = lambdas.clone();
        eigenvalues.extend(std::iter::repeat_n(T::zero(), self.degenerate_dim()));
        eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        Ok(SpectrumReport {
            eigenvalues,
            trace: lambdas.iter().copied().sum(),
            nondegenerate_det: lambdas.iter().fold(T::one(), |p, &l| p * l),
            log_det: lambdas.iter().map(|l| l.ln()).sum(),
            negative_sum: T::zero(),
        })
    }

    /// Largest `lambda_i` at the current floor position; drives the stability guard.
    pub fn lambda_max(&self, hat: &[T]) -> Result<T> {
        Ok(self.lambdas(hat)?.into_iter().fold(T::zero(), T::max))
    }

    /// Checks that the floor is flat: the Hessian at a floor point annihilates
    /// every direction along the floor.
    ///
    /// The first `min(probes, N - n)` probes are the degenerate unit vectors;
    /// the rest are random unit combinations of them. Returns `max ||H v||`
    /// (zero when `probes == 0`).
    pub fn verify_tangent_nullspace<R: Rng + ?Sized>(&self, theta: &[T], probes: usize, rng: &mut R) -> Result<T> {
        let (bar, _) = self.split(theta)?;
        if bar.iter().any(|&x| x != T::zero()) {
            return Err(Error::Precondition("tangent check requires a floor point (theta_bar = 0)".into()));
        }
        let d = self.degenerate_dim();
        if probes == 0 || d == 0 {
            return Ok(T::zero());
        }
        let h = self.hessian(theta)?;
        let n = self.n();
        let mut worst = T::zero();
        for p in 0..probes {
            let mut v = DVector::zeros(self.dim);
            if p < d {
                v[n + p] = T::one();
            } else {
                let dir: Vec<T> = (0..d).map(|_| T::standard_normal(rng)).collect();
                let len = norm(&dir);
                for (k, x) in dir.into_iter().enumerate() {
                    v[n + k] = x / len;
                }
            }
            worst = worst.max(crate::scalar::norm((&h * v).as_slice()));
        }
        Ok(worst)
    }
}

impl<T: Scalar> Objective<T> for ValleyModel<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, theta: &[T]) -> Result<T> {
        ValleyModel::loss(self, theta)
    }

    fn gradient(&self, theta: &[T]) -> Result<Vec<T>> {
        ValleyModel::gradient(self, theta)
    }

    fn hessian_vector_product(&self, theta: &[T], v: &[T]) -> Option<Result<Vec<T>>> {
        Some(self.hessian(theta).map(|h| (h * DVector::from_column_slice(v)).iter().copied().collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Independent scalar evaluation of the trace toy, written out by hand.
    fn trace_toy_scalar(t: &[f64]) -> f64 {
        (t[2] + t[3]).abs() * t[0] * t[0] + (t[2] + 2.0 * t[3]).abs() * t[1] * t[1]
    }

    fn anticorr_scalar(t: &[f64]) -> f64 {
        (4.0 - 2.0 * (-t[2] * t[2] - t[3] * t[3]).exp()) * t[0] * t[0]
            + (-(t[2] - t[3]).powi(2)).exp() * t[1] * t[1]
    }

    #[test]
    fn eval_loss_examples() {
        let toy = ValleyModel::<f64>::trace_toy();
        assert_eq!(toy.loss(&[0.0, 0.0, 3.0, -7.0]).unwrap(), 0.0);
        assert_eq!(toy.loss(&[1.0, 0.0, 1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(trace_toy_scalar(&[1.0, 0.0, 1.0, 1.0]), 2.0);
        let ac = ValleyModel::<f64>::anticorr_toy();
        assert!((ac.loss(&[1.0, 1.0, 0.0, 0.0]).unwrap() - 3.0).abs() < 1e-15);
        let p = [0.3, -1.2, 0.7, 0.1];
        assert!((ac.loss(&p).unwrap() - anticorr_scalar(&p)).abs() < 1e-14);
    }

    #[test]
    fn grad_examples() {
        let toy = ValleyModel::<f64>::trace_toy();
        assert_eq!(toy.gradient(&[0.0, 0.0, 0.4, 2.0]).unwrap(), vec![0.0; 4]);
        assert_eq!(toy.gradient(&[1.0, 1.0, 1.0, 1.0]).unwrap(), vec![4.0, 6.0, 2.0, 3.0]);
        let ac = ValleyModel::<f64>::anticorr_toy();
        assert_eq!(ac.gradient(&[1.0, 0.0, 0.0, 0.0]).unwrap(), vec![4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn hessian_examples() {
        let toy = ValleyModel::<f64>::trace_toy();
        let h = toy.hessian(&[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(h, DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 6.0, 0.0, 0.0])));
        let ac = ValleyModel::<f64>::anticorr_toy();
        let h = ac.hessian(&[0.0; 4]).unwrap();
        assert_eq!(h, DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 2.0, 0.0, 0.0])));
    }

    #[test]
    fn spectrum_examples() {
        let s = ValleyModel::<f64>::trace_toy().spectrum(&[1.0, 1.0]).unwrap();
        assert_eq!((s.trace, s.nondegenerate_det), (10.0, 24.0));
        assert_eq!(s.eigenvalues, vec![0.0, 0.0, 4.0, 6.0]);
        let ac = ValleyModel::<f64>::anticorr_toy();
        let s = ac.spectrum(&[0.0, 0.0]).unwrap();
        assert_eq!((s.trace, s.nondegenerate_det), (6.0, 8.0));
        let far = ac.spectrum(&[30.0, 30.0]).unwrap();
        assert!((far.trace - 10.0).abs() < 1e-12);
        assert!((far.nondegenerate_det - 16.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_grads_examples() {
        let toy = ValleyModel::<f64>::trace_toy();
        assert_eq!(toy.lambda_grads(&[0.5, 0.25]).unwrap(), vec![vec![2.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(toy.lambda_grads(&[1.0, -1.0]), Err(Error::Domain(_))));
        let ac = ValleyModel::<f64>::anticorr_toy();
        assert_eq!(ac.lambda_grads(&[0.0, 0.0]).unwrap(), vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn tangent_nullspace_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let toy = ValleyModel::<f64>::trace_toy();
        assert_eq!(toy.verify_tangent_nullspace(&[0.0, 0.0, 1.0, 1.0], 4, &mut rng).unwrap(), 0.0);
        let ac = ValleyModel::<f64>::anticorr_toy();
        let r = ac.verify_tangent_nullspace(&[0.0, 0.0, 0.5, -0.5], 8, &mut rng).unwrap();
        assert!(r <= 1e-8);
        assert_eq!(ac.verify_tangent_nullspace(&[0.0, 0.0, 0.5, -0.5], 0, &mut rng).unwrap(), 0.0);
        assert!(matches!(
            ac.verify_tangent_nullspace(&[0.1, 0.0, 0.5, -0.5], 3, &mut rng),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn locked_trace_toy_rejects_region_exit() {
        let toy = ValleyModel::<f64>::trace_toy_locked(&[1.0, 1.0]).unwrap();
        assert!(toy.loss(&[0.1, 0.1, 1.0, 1.0]).is_ok());
        assert!(matches!(toy.loss(&[0.1, 0.1, -3.0, 1.0]), Err(Error::Domain(_))));
        assert!(ValleyModel::<f64>::trace_toy_locked(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn wrong_length_is_argument_error() {
        let toy = ValleyModel::<f64>::trace_toy();
        assert!(matches!(toy.loss(&[0.0; 3]), Err(Error::Argument(_))));
        assert!(ParamVector::<f64>::new(vec![]).is_err());
        assert!(ParamVector::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn base_loss_offsets_loss_only() {
        let ac = ValleyModel::<f64>::anticorr_toy().with_base_loss(0.25);
        assert_eq!(ac.loss(&[0.0, 0.0, 1.0, 2.0]).unwrap(), 0.25);
        assert_eq!(ac.gradient(&[0.0, 0.0, 1.0, 2.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn works_in_single_precision() {
        let toy = ValleyModel::<f32>::trace_toy();
        assert_eq!(toy.gradient(&[1.0, 1.0, 1.0, 1.0]).unwrap(), vec![4.0f32, 6.0, 2.0, 3.0]);
    }
}
