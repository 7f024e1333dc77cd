//! Curvature profiles `lambda_i(theta_hat)` along the valley floor.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A smooth positive eigenvalue profile over the degenerate coordinates,
/// with its first and second derivatives.
pub trait Curvature<T: Scalar>: Send + Sync + fmt::Debug {
    fn value(&self, hat: &[T]) -> Result<T>;
    fn gradient(&self, hat: &[T]) -> Result<Vec<T>>;
    fn hessian(&self, hat: &[T]) -> Result<DMatrix<T>>;

    /// `false` when derivatives fall back to finite differences.
    fn is_exact(&self) -> bool {
        true
    }
}

/// `lambda = c`.
#[derive(Debug, Clone)]
pub struct Constant<T>(pub T);

impl<T: Scalar> Curvature<T> for Constant<T> {
    fn value(&self, _hat: &[T]) -> Result<T> {
        Ok(self.0)
    }
    fn gradient(&self, hat: &[T]) -> Result<Vec<T>> {
        Ok(vec![T::zero(); hat.len()])
    }
    fn hessian(&self, hat: &[T]) -> Result<DMatrix<T>> {
        Ok(DMatrix::zeros(hat.len(), hat.len()))
    }
}

/// Which side of the hyperplane `c . x = 0` a point must stay on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Side {
    Positive,
    Negative,
}

impl Side {
    pub fn of<T: Scalar>(x: T) -> Option<Side> {
        if x > T::zero() {
            Some(Side::Positive)
        } else if x < T::zero() {
            Some(Side::Negative)
        } else {
            None
        }
    }
}

/// `lambda = scale * |c . x|`, non-differentiable on the hyperplane `c . x = 0`.
///
/// When `region` is set the profile acts as a sign-region certificate: any
/// evaluation on the other side (or on the kink) is a domain error.
#[derive(Debug, Clone)]
pub struct AbsLinear<T> {
    pub scale: T,
    pub coeffs: Vec<T>,
    pub region: Option<Side>,
}

impl<T: Scalar> AbsLinear<T> {
    fn projection(&self, hat: &[T]) -> T {
        crate::scalar::dot(&self.coeffs, hat)
    }

    fn side_checked(&self, hat: &[T]) -> Result<Side> {
        let s = self.projection(hat);
        let side = Side::of(s).ok_or_else(|| {
            Error::Domain(format!("kink of |{:?} . x| at x = {:?}", self.coeffs, hat))
        })?;
        match self.region {
            Some(locked) if locked != side => Err(Error::Domain(format!(
                "left sign region {:?} of {:?} . x (value {})",
                locked, self.coeffs, s
            ))),
            _ => Ok(side),
        }
    }
}

impl<T: Scalar> Curvature<T> for AbsLinear<T> {
    fn value(&self, hat: &[T]) -> Result<T> {
        let s = self.projection(hat);
        if self.region.is_some() {
            self.side_checked(hat)?;
        }
        Ok(self.scale * s.abs())
    }

    fn gradient(&self, hat: &[T]) -> Result<Vec<T>> {
        let sign = match self.side_checked(hat)? {
            Side::Positive => T::one(),
            Side::Negative => -T::one(),
        };
        Ok(self.coeffs.iter().map(|&c| self.scale * sign * c).collect())
    }

    fn hessian(&self, hat: &[T]) -> Result<DMatrix<T>> {
        self.side_checked(hat)?;
        Ok(DMatrix::zeros(hat.len(), hat.len()))
    }
}

/// `lambda = offset + amplitude * exp(-x^T Q x)` with `Q` symmetric.
#[derive(Debug, Clone)]
pub struct GaussianBump<T: Scalar> {
    pub offset: T,
    pub amplitude: T,
    pub form: DMatrix<T>,
}

impl<T: Scalar> GaussianBump<T> {
    fn parts(&self, hat: &[T]) -> (T, DVector<T>) {
        let x = DVector::from_column_slice(hat);
        let qx = &self.form * &x;
        let e = (-x.dot(&qx)).exp();
        (e, qx)
    }
}

impl<T: Scalar> Curvature<T> for GaussianBump<T> {
    fn value(&self, hat: &[T]) -> Result<T> {
        let (e, _) = self.parts(hat);
        Ok(self.offset + self.amplitude * e)
    }

    fn gradient(&self, hat: &[T]) -> Result<Vec<T>> {
        let (e, qx) = self.parts(hat);
        let k = -T::lit(2.0) * self.amplitude * e;
        Ok(qx.iter().map(|&v| k * v).collect())
    }

    fn hessian(&self, hat: &[T]) -> Result<DMatrix<T>> {
        let (e, qx) = self.parts(hat);
        let outer = &qx * qx.transpose() * T::lit(4.0);
        Ok((outer - &self.form * T::lit(2.0)) * (self.amplitude * e))
    }
}

/// `lambda = c + g^T x + 1/2 x^T Q x`.
#[derive(Debug, Clone)]
pub struct QuadraticForm<T: Scalar> {
    pub constant: T,
    pub linear: Vec<T>,
    pub quad: DMatrix<T>,
}

impl<T: Scalar> Curvature<T> for QuadraticForm<T> {
    fn value(&self, hat: &[T]) -> Result<T> {
        let x = DVector::from_column_slice(hat);
        let half = T::lit(0.5);
        Ok(self.constant + crate::scalar::dot(&self.linear, hat) + half * x.dot(&(&self.quad * &x)))
    }

    fn gradient(&self, hat: &[T]) -> Result<Vec<T>> {
        let x = DVector::from_column_slice(hat);
        let qx = &self.quad * x;
        Ok(self.linear.iter().zip(qx.iter()).map(|(&g, &q)| g + q).collect())
    }

    fn hessian(&self, _hat: &[T]) -> Result<DMatrix<T>> {
        Ok(self.quad.clone())
    }
}

type ValueFn<T> = Arc<dyn Fn(&[T]) -> T + Send + Sync>;
type GradientFn<T> = Arc<dyn Fn(&[T]) -> Vec<T> + Send + Sync>;

/// User-supplied profile. Missing derivatives are taken by central differences
/// and the profile reports itself as inexact.
#[derive(Clone)]
pub struct FnCurvature<T: Scalar> {
    value: ValueFn<T>,
    gradient: Option<GradientFn<T>>,
    step: T,
}

impl<T: Scalar> fmt::Debug for FnCurvature<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnCurvature")
            .field("analytic_gradient", &self.gradient.is_some())
            .field("step", &self.step)
            .finish()
    }
}

impl<T: Scalar> FnCurvature<T> {
    pub fn new(value: impl Fn(&[T]) -> T + Send + Sync + 'static) -> Self {
        Self { value: Arc::new(value), gradient: None, step: T::lit(1e-5) }
    }

    pub fn with_gradient(mut self, gradient: impl Fn(&[T]) -> Vec<T> + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    pub fn with_step(mut self, step: T) -> Self {
        self.step = step;
        self
    }

    fn fd_gradient(&self, hat: &[T]) -> Vec<T> {
        let two_h = self.step + self.step;
        let mut x = hat.to_vec();
        (0..hat.len())
            .map(|k| {
                x[k] = hat[k] + self.step;
                let up = (self.value)(&x);
                x[k] = hat[k] - self.step;
                let down = (self.value)(&x);
                x[k] = hat[k];
                (up - down) / two_h
            })
            .collect()
    }

    fn grad_at(&self, hat: &[T]) -> Vec<T> {
        match &self.gradient {
            Some(g) => g(hat),
            None => self.fd_gradient(hat),
        }
    }
}

impl<T: Scalar> Curvature<T> for FnCurvature<T> {
    fn value(&self, hat: &[T]) -> Result<T> {
        Ok((self.value)(hat))
    }

    fn gradient(&self, hat: &[T]) -> Result<Vec<T>> {
        Ok(self.grad_at(hat))
    }

    fn hessian(&self, hat: &[T]) -> Result<DMatrix<T>> {
        let d = hat.len();
        let two_h = self.step + self.step;
        let mut x = hat.to_vec();
        let mut h = DMatrix::zeros(d, d);
        for k in 0..d {
            x[k] = hat[k] + self.step;
            let up = self.grad_at(&x);
            x[k] = hat[k] - self.step;
            let down = self.grad_at(&x);
            x[k] = hat[k];
            for r in 0..d {
                h[(r, k)] = (up[r] - down[r]) / two_h;
            }
        }
        Ok((&h + h.transpose()) * T::lit(0.5))
    }

    fn is_exact(&self) -> bool {
        false
    }
}
