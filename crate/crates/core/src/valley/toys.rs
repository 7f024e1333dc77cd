//! Built-in valley models and their declarative specification.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{AbsLinear, Constant, Curvature, GaussianBump, QuadraticForm, Side, ValleyModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<T: Scalar> ValleyModel<T> {
    /// `L = |t3 + t4| t1^2 + |t3 + 2 t4| t2^2`, i.e. `lambda_1 = 2|t3 + t4|`,
    /// `lambda_2 = 2|t3 + 2 t4|`. Evaluates anywhere; derivatives fail on the kinks.
    pub fn trace_toy() -> Self {
        Self::trace_toy_with(None)
    }

    /// Trace toy pinned to the sign region containing `hat`; leaving it is a domain error.
    pub fn trace_toy_locked(hat: &[T]) -> Result<Self> {
        if hat.len() != 2 {
            return Err(Error::Argument("trace toy has 2 degenerate coordinates".into()));
        }
        let s1 = Side::of(hat[0] + hat[1]);
        let s2 = Side::of(hat[0] + T::lit(2.0) * hat[1]);
        match (s1, s2) {
            (Some(a), Some(b)) => Ok(Self::trace_toy_with(Some((a, b)))),
            _ => Err(Error::Domain(format!("{hat:?} lies on a kink of the trace toy"))),
        }
    }

    fn trace_toy_with(region: Option<(Side, Side)>) -> Self {
        let two = T::lit(2.0);
        let l1 = AbsLinear { scale: two, coeffs: vec![T::one(), T::one()], region: region.map(|r| r.0) };
        let l2 = AbsLinear { scale: two, coeffs: vec![T::one(), two], region: region.map(|r| r.1) };
        Self::new("trace_toy", 4, vec![Arc::new(l1), Arc::new(l2)]).expect("valid built-in")
    }

    /// `L = (4 - 2 exp(-t3^2 - t4^2)) t1^2 + exp(-(t3 - t4)^2) t2^2`, built so that
    /// trace and determinant respond in opposite directions to the two noise designs.
    pub fn anticorr_toy() -> Self {
        let l1 = GaussianBump { offset: T::lit(8.0), amplitude: T::lit(-4.0), form: DMatrix::identity(2, 2) };
        let l2 = GaussianBump {
            offset: T::zero(),
            amplitude: T::lit(2.0),
            form: DMatrix::from_row_slice(2, 2, &[T::one(), -T::one(), -T::one(), T::one()]),
        };
        Self::new("anticorr_toy", 4, vec![Arc::new(l1), Arc::new(l2)]).expect("valid built-in")
    }

    /// Constant-curvature quadratic with `degenerate` flat directions appended.
    pub fn constant(lambdas: &[T], degenerate: usize) -> Result<Self> {
        if lambdas.iter().any(|&l| l <= T::zero()) {
            return Err(Error::Argument("constant curvatures must be positive".into()));
        }
        let curv: Vec<Arc<dyn Curvature<T>>> =
            lambdas.iter().map(|&l| Arc::new(Constant(l)) as Arc<dyn Curvature<T>>).collect();
        Self::new("constant", lambdas.len() + degenerate, curv)
    }

    /// Two non-degenerate and two degenerate directions with curvature that
    /// falls off quadratically along the floor: `lambda_i = c_i - 1/2 x^T Q_i x`,
    /// `Q_i` positive definite. The loss is quartic and the degenerate Hessian
    /// block `1/2 sum theta_i^2 d^2 lambda_i` is negative definite off the floor.
    /// Valid where both `lambda_i > 0`.
    pub fn quartic_valley() -> Self {
        let form = |c: f64, q: [f64; 2]| QuadraticForm {
            constant: T::lit(c),
            linear: vec![T::zero(); 2],
            quad: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![T::lit(-q[0]), T::lit(-q[1])])),
        };
        Self::new("quartic_valley", 4, vec![Arc::new(form(3.0, [2.0, 1.0])), Arc::new(form(5.0, [1.0, 3.0]))])
            .expect("valid built-in")
    }
}

/// Declarative model entry: a model name plus its numeric parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValleySpec {
    TraceToy {
        /// Pin the sign region containing this floor position.
        #[serde(default)]
        lock_region_at: Option<Vec<f64>>,
    },
    AnticorrToy {},
    Constant {
        lambdas: Vec<f64>,
        #[serde(default)]
        degenerate: usize,
    },
    QuarticValley {},
}

impl ValleySpec {
    pub fn build<T: Scalar>(&self) -> Result<ValleyModel<T>> {
        match self {
            ValleySpec::TraceToy { lock_region_at: None } => Ok(ValleyModel::trace_toy()),
            ValleySpec::TraceToy { lock_region_at: Some(hat) } => {
                let hat: Vec<T> = hat.iter().map(|&x| T::lit(x)).collect();
                ValleyModel::trace_toy_locked(&hat)
            }
            ValleySpec::AnticorrToy {} => Ok(ValleyModel::anticorr_toy()),
            ValleySpec::Constant { lambdas, degenerate } => {
                let l: Vec<T> = lambdas.iter().map(|&x| T::lit(x)).collect();
                ValleyModel::constant(&l, *degenerate)
            }
            ValleySpec::QuarticValley {} => Ok(ValleyModel::quartic_valley()),
        }
    }
}
