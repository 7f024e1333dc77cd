//! Loss valleys, SGD-style noise and Hessian spectra.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom fix it to one precision for convenience.

pub mod checkpoint;
pub mod dynamics;
pub mod error;
pub mod minibatch;
pub mod noise;
pub mod objective;
pub mod path;
pub mod scalar;
pub mod seeds;
pub mod spectrum;
pub mod stats;
pub mod valley;

pub use dynamics::{
    eta_squared_sweep, measure_drift, measure_equilibrium_variance, run, run_ensemble, step, Observable, RunRecord,
    SimulationConfig,
};
pub use error::{Error, Result};
pub use noise::{NoiseCovariance, NoiseSpec, SpectralFunctional};
pub use objective::Objective;
pub use path::{PathNode, ProjectionSettings, RefinedPath, TraceEstimator, Trajectory};
pub use scalar::Scalar;
pub use spectrum::{full_spectrum, hutchinson_trace, HvpMode, HvpOracle};
pub use stats::{Estimate, LinearFit};
pub use valley::{ParamVector, SpectrumReport, ValleyModel, ValleySpec};

/// Crate version, recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type ValleyModelF64 = ValleyModel<f64>;
pub type ValleyModelF32 = ValleyModel<f32>;
pub type RunRecordF64 = RunRecord<f64>;
pub type RunRecordF32 = RunRecord<f32>;
pub type NoiseCovarianceF64 = NoiseCovariance<f64>;
pub type NoiseCovarianceF32 = NoiseCovariance<f32>;
pub type SpectrumReportF64 = SpectrumReport<f64>;
pub type SpectrumReportF32 = SpectrumReport<f32>;
pub type MlpObjectiveF64 = minibatch::MlpObjective<f64>;
pub type MlpObjectiveF32 = minibatch::MlpObjective<f32>;
