//! Twice-differentiable losses consumed by the spectrum and path tools.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub trait Objective<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;
    fn loss(&self, theta: &[T]) -> Result<T>;
    fn gradient(&self, theta: &[T]) -> Result<Vec<T>>;

    /// Analytic `H(theta) v`, when the objective can provide one.
    fn hessian_vector_product(&self, _theta: &[T], _v: &[T]) -> Option<Result<Vec<T>>> {
        None
    }
}

/// `L(x) = 1/2 (x - c)^T A (x - c)` for a symmetric `A`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective<T: Scalar> {
    matrix: DMatrix<T>,
    center: DVector<T>,
}

impl<T: Scalar> QuadraticObjective<T> {
    pub fn new(matrix: DMatrix<T>) -> Result<Self> {
        let n = matrix.nrows();
        let center = DVector::zeros(n);
        Self::centered(matrix, center)
    }

    pub fn centered(matrix: DMatrix<T>, center: DVector<T>) -> Result<Self> {
        if !matrix.is_square() || center.len() != matrix.nrows() {
            return Err(Error::Argument("quadratic objective needs a square matrix and matching center".into()));
        }
        Ok(Self { matrix, center })
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    fn offset(&self, theta: &[T]) -> Result<DVector<T>> {
        if theta.len() != self.center.len() {
            return Err(Error::Argument(format!("expected {} parameters, got {}", self.center.len(), theta.len())));
        }
        Ok(DVector::from_column_slice(theta) - &self.center)
    }
}

impl<T: Scalar> Objective<T> for QuadraticObjective<T> {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn loss(&self, theta: &[T]) -> Result<T> {
        let d = self.offset(theta)?;
        Ok(T::lit(0.5) * d.dot(&(&self.matrix * &d)))
    }

    fn gradient(&self, theta: &[T]) -> Result<Vec<T>> {
        let d = self.offset(theta)?;
        Ok((&self.matrix * d).iter().copied().collect())
    }

    fn hessian_vector_product(&self, _theta: &[T], v: &[T]) -> Option<Result<Vec<T>>> {
        Some(Ok((&self.matrix * DVector::from_column_slice(v)).iter().copied().collect()))
    }
}

type LossFn<T> = Arc<dyn Fn(&[T]) -> T + Send + Sync>;
type GradFn<T> = Arc<dyn Fn(&[T]) -> Vec<T> + Send + Sync>;

/// Closure-backed objective.
#[derive(Clone)]
pub struct FnObjective<T: Scalar> {
    dim: usize,
    loss: LossFn<T>,
    grad: GradFn<T>,
}

impl<T: Scalar> FnObjective<T> {
    pub fn new(
        dim: usize,
        loss: impl Fn(&[T]) -> T + Send + Sync + 'static,
        grad: impl Fn(&[T]) -> Vec<T> + Send + Sync + 'static,
    ) -> Self {
        Self { dim, loss: Arc::new(loss), grad: Arc::new(grad) }
    }
}

impl<T: Scalar> Objective<T> for FnObjective<T> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn loss(&self, theta: &[T]) -> Result<T> {
        Ok((self.loss)(theta))
    }
    fn gradient(&self, theta: &[T]) -> Result<Vec<T>> {
        Ok((self.grad)(theta))
    }
}

/// Central-difference gradient of any scalar function; a test and diagnostics aid.
pub fn finite_difference_gradient<T: Scalar>(f: impl Fn(&[T]) -> Result<T>, theta: &[T], step: T) -> Result<Vec<T>> {
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        x[k] = theta[k] + step;
        let up = f(&x)?;
        x[k] = theta[k] - step;
        let down = f(&x)?;
        x[k] = theta[k];
        out.push((up - down) / (step + step));
    }
    Ok(out)
}
