//! Gradient-noise covariance designs, a Gaussian sampler, and closed-form
//! equilibrium / drift predictions.
//!
//! Every design is diagonal over the non-degenerate block:
//!
//! | design       | `C_ii`                          |
//! |--------------|---------------------------------|
//! | SGD-aligned  | `(1/S)(1 - S/M) lambda_i`       |
//! | f-designed   | `lambda_i * df/dlambda_i`       |
//! | isotropic    | `C`                             |

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::valley::ValleyModel;

/// Numerical floor below which an eigenvalue counts as negative.
pub const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Diagonal,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceScale<T> {
    SgdAligned { batch: usize, dataset: usize },
    Isotropic { c: T },
    FDesigned,
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariance<T: Scalar> {
    kind: CovarianceKind,
    matrix: DMatrix<T>,
    scale: CovarianceScale<T>,
    // Symmetric square root, kept only for full matrices.
    root: Option<DMatrix<T>>,
}

fn sgd_factor<T: Scalar>(batch: usize, dataset: usize) -> Result<T> {
    if batch < 1 || batch > dataset {
        return Err(Error::Argument(format!("batch size must satisfy 1 <= S <= M (S = {batch}, M = {dataset})")));
    }
    let s = T::from_usize_lossy(batch);
    let m = T::from_usize_lossy(dataset);
    Ok((T::one() - s / m) / s)
}

fn check_positive<T: Scalar>(lambdas: &[T]) -> Result<()> {
    match lambdas.iter().position(|&l| !(l > T::zero())) {
        Some(i) => Err(Error::Argument(format!("lambda_{i} = {} must be positive", lambdas[i]))),
        None => Ok(()),
    }
}

impl<T: Scalar> NoiseCovariance<T> {
    /// `C = (1/S)(1 - S/M) diag(lambda)`.
    pub fn sgd_aligned(lambdas: &[T], batch: usize, dataset: usize) -> Result<Self> {
        check_positive(lambdas)?;
        let k = sgd_factor::<T>(batch, dataset)?;
        let diag: Vec<T> = lambdas.iter().map(|&l| k * l).collect();
        Ok(Self::diag_unchecked(diag, CovarianceScale::SgdAligned { batch, dataset }))
    }

    /// `C_ii = lambda_i * df/dlambda_i`; requires `lambda > 0` and `df/dlambda >= 0`.
    pub fn f_designed(lambdas: &[T], df_dlambda: &[T]) -> Result<Self> {
        if lambdas.len() != df_dlambda.len() {
            return Err(Error::Argument("lambda and df/dlambda lengths differ".into()));
        }
        check_positive(lambdas)?;
        if let Some(i) = df_dlambda.iter().position(|&d| !(d >= T::zero())) {
            return Err(Error::Argument(format!(
                "df/dlambda_{i} = {} is negative; the functional must be non-decreasing in each lambda",
                df_dlambda[i]
            )));
        }
        let diag = lambdas.iter().zip(df_dlambda).map(|(&l, &d)| l * d).collect();
        Ok(Self::diag_unchecked(diag, CovarianceScale::FDesigned))
    }

    /// `C * I_n` on the non-degenerate block.
    pub fn isotropic(n: usize, c: T) -> Result<Self> {
        if !(c > T::zero()) {
            return Err(Error::Argument(format!("isotropic noise level must be positive, got {c}")));
        }
        Ok(Self::diag_unchecked(vec![c; n], CovarianceScale::Isotropic { c }))
    }

    pub fn diagonal(variances: Vec<T>) -> Result<Self> {
        if let Some(i) = variances.iter().position(|&v| !(v >= T::zero()) || !v.is_finite()) {
            return Err(Error::Argument(format!("variance {i} = {} is not a finite non-negative number", variances[i])));
        }
        Ok(Self::diag_unchecked(variances, CovarianceScale::Explicit))
    }

    /// A full covariance, validated symmetric PSD and factored once for sampling.
    pub fn full(matrix: DMatrix<T>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Argument("covariance must be square".into()));
        }
        let n = matrix.nrows();
        let tol = T::lit(1e-12) * matrix.iter().fold(T::zero(), |m, v| m.max(v.abs())).max(T::one());
        for r in 0..n {
            for c in 0..r {
                if (matrix[(r, c)] - matrix[(c, r)]).abs() > tol {
                    return Err(Error::Argument(format!("covariance is not symmetric at ({r}, {c})")));
                }
            }
        }
        let (values, vectors) = T::symmetric_eigen(&matrix);
        if let Some(&worst) = values.first() {
            if worst < -T::lit(PSD_TOLERANCE) {
                return Err(Error::Argument(format!("covariance is not PSD: smallest eigenvalue {worst}")));
            }
        }
        let roots = DVector::from_iterator(n, values.iter().map(|&v| v.max(T::zero()).sqrt()));
        let root = &vectors * DMatrix::from_diagonal(&roots) * vectors.transpose();
        Ok(Self { kind: CovarianceKind::Full, matrix, scale: CovarianceScale::Explicit, root: Some(root) })
    }

    fn diag_unchecked(diag: Vec<T>, scale: CovarianceScale<T>) -> Self {
        let matrix = DMatrix::from_diagonal(&DVector::from_vec(diag));
        Self { kind: CovarianceKind::Diagonal, matrix, scale, root: None }
    }

    pub fn kind(&self) -> CovarianceKind {
        self.kind
    }

    pub fn scale(&self) -> &CovarianceScale<T> {
        &self.scale
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_psd(&self) -> bool {
        let (values, _) = T::symmetric_eigen(&self.matrix);
        values.first().is_none_or(|&v| v >= -T::lit(PSD_TOLERANCE))
    }

    /// A zero-mean Gaussian draw with this covariance.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let n = self.dim();
        match &self.root {
            None => (0..n)
                .map(|i| {
                    let v = self.matrix[(i, i)];
                    if v == T::zero() {
                        T::zero()
                    } else {
                        v.sqrt() * T::standard_normal(rng)
                    }
                })
                .collect(),
            Some(root) => {
                let z = DVector::from_iterator(n, (0..n).map(|_| T::standard_normal(rng)));
                (root * z).iter().copied().collect()
            }
        }
    }
}

/// A spectral functional `f(lambda)` that noise can be designed to decrease.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralFunctional {
    /// `sum lambda_i`
    Trace,
    /// `log prod lambda_i`
    Logdet,
}

impl SpectralFunctional {
    pub fn value<T: Scalar>(&self, lambdas: &[T]) -> T {
        match self {
            SpectralFunctional::Trace => lambdas.iter().copied().sum(),
            SpectralFunctional::Logdet => lambdas.iter().map(|l| l.ln()).sum(),
        }
    }

    pub fn gradient<T: Scalar>(&self, lambdas: &[T]) -> Vec<T> {
        match self {
            SpectralFunctional::Trace => vec![T::one(); lambdas.len()],
            SpectralFunctional::Logdet => lambdas.iter().map(|&l| T::one() / l).collect(),
        }
    }
}

/// Noise design selected by configuration. State-dependent designs are
/// re-evaluated at the current `lambda(theta_hat)` on every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    None,
    SgdAligned { batch: usize, dataset: usize },
    Isotropic { c: f64 },
    FDesigned { f: SpectralFunctional },
}

impl NoiseSpec {
    pub fn is_state_dependent(&self) -> bool {
        matches!(self, NoiseSpec::SgdAligned { .. } | NoiseSpec::FDesigned { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::SgdAligned { batch, dataset } => sgd_factor::<f64>(batch, dataset).map(|_| ()),
            NoiseSpec::Isotropic { c } if !(c > 0.0) => {
                Err(Error::Argument(format!("isotropic noise level must be positive, got {c}")))
            }
            _ => Ok(()),
        }
    }

    /// The covariance at the given curvatures, or `None` for noiseless updates.
    pub fn covariance_at<T: Scalar>(&self, lambdas: &[T]) -> Result<Option<NoiseCovariance<T>>> {
        Ok(match *self {
            NoiseSpec::None => None,
            NoiseSpec::SgdAligned { batch, dataset } => Some(NoiseCovariance::sgd_aligned(lambdas, batch, dataset)?),
            NoiseSpec::Isotropic { c } => Some(NoiseCovariance::isotropic(lambdas.len(), T::lit(c))?),
            NoiseSpec::FDesigned { f } => Some(NoiseCovariance::f_designed(lambdas, &f.gradient(lambdas))?),
        })
    }

    /// Diagonal variances at the given curvatures (all zero when noiseless).
    pub fn variances_at<T: Scalar>(&self, lambdas: &[T]) -> Result<Vec<T>> {
        Ok(match *self {
            NoiseSpec::None => vec![T::zero(); lambdas.len()],
            NoiseSpec::Isotropic { c } => {
                self.validate()?;
                vec![T::lit(c); lambdas.len()]
            }
            NoiseSpec::SgdAligned { batch, dataset } => {
                check_positive(lambdas)?;
                let k = sgd_factor::<T>(batch, dataset)?;
                lambdas.iter().map(|&l| k * l).collect()
            }
            NoiseSpec::FDesigned { f } => {
                check_positive(lambdas)?;
                lambdas.iter().zip(f.gradient(lambdas)).map(|(&l, d)| l * d).collect()
            }
        })
    }
}

/// Rejects `eta * lambda >= 2`, where the discrete OU recursion diverges.
pub fn stability_guard<T: Scalar>(lambda: T, eta: T) -> Result<()> {
    let product = eta * lambda;
    if product >= T::lit(2.0) || !product.is_finite() {
        return Err(Error::Instability { product: product.as_f64(), lambda: lambda.as_f64() });
    }
    Ok(())
}

/// Stationary `<theta_i^2>` of `theta <- theta - eta (lambda theta + xi)`,
/// `xi ~ N(0, cov_ii)`: the exact solution `eta cov / (lambda (2 - eta lambda))`.
pub fn predicted_equilibrium_variance<T: Scalar>(lambda: T, eta: T, cov_ii: T) -> Result<T> {
    if !(lambda > T::zero()) || !(eta > T::zero()) {
        return Err(Error::Argument(format!("need lambda > 0 and eta > 0 (lambda = {lambda}, eta = {eta})")));
    }
    if cov_ii < T::zero() {
        return Err(Error::Argument(format!("variance must be non-negative, got {cov_ii}")));
    }
    stability_guard(lambda, eta)?;
    Ok(eta * cov_ii / (lambda * (T::lit(2.0) - eta * lambda)))
}

/// SGD-aligned special case: `eta (1 - S/M) / (S (2 - eta lambda))`.
pub fn predicted_sgd_equilibrium_variance<T: Scalar>(lambda: T, eta: T, batch: usize, dataset: usize) -> Result<T> {
    let cov = sgd_factor::<T>(batch, dataset)? * lambda;
    predicted_equilibrium_variance(lambda, eta, cov)
}

/// Leading-order expected per-step trace change under SGD-aligned noise:
/// `-(eta^2 / 4S)(1 - S/M) ||sum_i grad lambda_i||^2`.
pub fn predicted_trace_drift<T: Scalar>(
    model: &ValleyModel<T>,
    hat: &[T],
    eta: T,
    batch: usize,
    dataset: usize,
) -> Result<T> {
    let k = sgd_factor::<T>(batch, dataset)?;
    let weights = vec![T::one(); model.n()];
    Ok(k * weighted_gradient_drift(model, hat, eta, &weights)?)
}

/// Leading-order expected per-step change of `f(lambda)` under f-designed noise:
/// `-(eta^2 / 4) ||sum_i (df/dlambda_i) grad lambda_i||^2`.
pub fn predicted_f_drift<T: Scalar>(model: &ValleyModel<T>, hat: &[T], eta: T, f_grad: &[T]) -> Result<T> {
    if f_grad.len() != model.n() {
        return Err(Error::Argument(format!("need {} df/dlambda values, got {}", model.n(), f_grad.len())));
    }
    weighted_gradient_drift(model, hat, eta, f_grad)
}

/// [`predicted_f_drift`] with `df/dlambda` taken from a named functional at `hat`.
pub fn predicted_functional_drift<T: Scalar>(
    model: &ValleyModel<T>,
    hat: &[T],
    eta: T,
    functional: SpectralFunctional,
) -> Result<T> {
    let lambdas = model.lambdas(hat)?;
    predicted_f_drift(model, hat, eta, &functional.gradient(&lambdas))
}

fn weighted_gradient_drift<T: Scalar>(model: &ValleyModel<T>, hat: &[T], eta: T, weights: &[T]) -> Result<T> {
    let grads = model.lambda_grads(hat)?;
    let mut total = vec![T::zero(); hat.len()];
    for (g, &w) in grads.iter().zip(weights) {
        for (acc, &d) in total.iter_mut().zip(g) {
            *acc += w * d;
        }
    }
    let sq: T = total.iter().map(|&v| v * v).sum();
    Ok(-eta * eta / T::lit(4.0) * sq)
}
