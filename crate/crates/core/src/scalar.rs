//! Floating-point abstraction shared by every numerical routine in the crate.
//!
//! All math is written against [`Scalar`], which is implemented for `f32` and
//! `f64`. The handful of operations that need a concrete LAPACK-style kernel
//! (symmetric eigendecomposition) or a concrete sampler are routed through
//! trait hooks so the generic code never names a concrete float type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use nalgebra::{DMatrix, SymmetricEigen};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar usable throughout the lab.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Machine epsilon as used by finite-difference step heuristics.
    const EPS: f64;

    /// Eigenvalues (ascending) and matching column eigenvectors of a symmetric matrix.
    fn symmetric_eigen(matrix: &DMatrix<Self>) -> (Vec<Self>, DMatrix<Self>);

    /// One draw from N(0, 1).
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Converts an `f64` literal. Panics only if the target cannot represent it at all.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(x: usize) -> Self {
        Self::from_usize(x).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const EPS: f64 = <$t>::EPSILON as f64;

            fn symmetric_eigen(matrix: &DMatrix<Self>) -> (Vec<Self>, DMatrix<Self>) {
                let n = matrix.nrows();
                if n == 0 {
                    return (Vec::new(), DMatrix::zeros(0, 0));
                }
                let eig = SymmetricEigen::new(matrix.clone());
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
                let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
                let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
                (values, vectors)
            }

            #[inline]
            fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                StandardNormal.sample(rng)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Euclidean norm of a slice.
pub fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
