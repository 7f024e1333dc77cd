//! Hessian-vector products, dense spectra for small systems, Hutchinson trace
//! estimates and negative-eigenvalue accounting for any [`Objective`].

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{run_ensemble, SimulationConfig};
use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use crate::objective::Objective;
use crate::scalar::{dot, norm, Scalar};
use crate::stats::{linear_fit, mean, mean_estimate, Estimate, LinearFit};
use crate::valley::{SpectrumReport, ValleyModel};

/// Largest parameter count for which [`full_spectrum`] assembles a dense Hessian.
pub const MAX_DENSE_DIM: usize = 8000;
/// Eigenvalues within this fraction of the largest magnitude count as zero in spectra.
pub const SPECTRUM_RANK_TOL: f64 = 1e-6;
/// Fewest equilibrated states accepted by [`negative_sum_vs_loss`].
pub const MIN_NEGEIG_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HvpMode<T> {
    /// The objective's own second derivatives.
    Analytic,
    /// `(grad(theta + h u) - grad(theta - h u)) / 2h` on the unit direction `u`;
    /// `None` picks `h = sqrt(eps) (1 + ||theta||)`.
    FiniteDifference { step: Option<T> },
}

/// Hessian-vector products of an objective.
pub struct HvpOracle<'a, T: Scalar> {
    objective: &'a dyn Objective<T>,
    mode: HvpMode<T>,
}

impl<'a, T: Scalar> HvpOracle<'a, T> {
    pub fn new(objective: &'a dyn Objective<T>, mode: HvpMode<T>) -> Self {
        Self { objective, mode }
    }

    pub fn analytic(objective: &'a dyn Objective<T>) -> Self {
        Self::new(objective, HvpMode::Analytic)
    }

    pub fn finite_difference(objective: &'a dyn Objective<T>) -> Self {
        Self::new(objective, HvpMode::FiniteDifference { step: None })
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    pub fn mode(&self) -> HvpMode<T> {
        self.mode
    }

    pub fn objective(&self) -> &'a dyn Objective<T> {
        self.objective
    }

    pub fn default_step(theta: &[T]) -> T {
        T::lit(T::EPS).sqrt() * (T::one() + norm(theta))
    }

    /// `H(theta) v`.
    pub fn hvp(&self, theta: &[T], v: &[T]) -> Result<Vec<T>> {
        let d = self.dim();
        if theta.len() != d || v.len() != d {
            return Err(Error::Argument(format!(
                "hvp expects vectors of length {d}, got theta {} and v {}",
                theta.len(),
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Argument("hvp direction is not finite".into()));
        }
        let vnorm = norm(v);
        if vnorm == T::zero() {
            return Ok(vec![T::zero(); d]);
        }
        let (out, h) = match self.mode {
            HvpMode::Analytic => {
                let hv = self.objective.hessian_vector_product(theta, v).ok_or_else(|| {
                    Error::Capability("objective has no analytic Hessian-vector product; use finite differences".into())
                })??;
                (hv, None)
            }
            HvpMode::FiniteDifference { step } => {
                let h = step.unwrap_or_else(|| Self::default_step(theta));
                let shifted = |sign: T| -> Vec<T> { theta.iter().zip(v).map(|(&t, &x)| t + sign * h * x / vnorm).collect() };
                let up = self.objective.gradient(&shifted(T::one()))?;
                let down = self.objective.gradient(&shifted(-T::one()))?;
                let scale = vnorm / (h + h);
                (up.iter().zip(&down).map(|(&a, &b)| (a - b) * scale).collect(), Some(h))
            }
        };
        if out.iter().any(|x| !x.is_finite()) {
            let why = match h {
                Some(h) => format!("non-finite Hessian-vector product with finite-difference step h = {h}"),
                None => "non-finite analytic Hessian-vector product".to_string(),
            };
            return Err(Error::Numerical(why));
        }
        Ok(out)
    }

    /// `max |v^T H w - w^T H v| / (||v|| ||w||)` over random Gaussian pairs.
    pub fn symmetry_defect<R: Rng + ?Sized>(&self, theta: &[T], pairs: usize, rng: &mut R) -> Result<T> {
        let d = self.dim();
        let mut worst = T::zero();
        for _ in 0..pairs {
            let v: Vec<T> = (0..d).map(|_| T::standard_normal(rng)).collect();
            let w: Vec<T> = (0..d).map(|_| T::standard_normal(rng)).collect();
            let gap = (dot(&v, &self.hvp(theta, &w)?) - dot(&w, &self.hvp(theta, &v)?)).abs();
            worst = worst.max(gap / (norm(&v) * norm(&w)));
        }
        Ok(worst)
    }
}

/// Unbiased trace estimate from `probes` Rademacher vectors `z`: the mean of
/// `z^T H z`, with the probe-level standard error (zero for a single probe).
pub fn hutchinson_trace<T: Scalar, R: Rng + ?Sized>(
    oracle: &HvpOracle<'_, T>,
    theta: &[T],
    probes: usize,
    rng: &mut R,
) -> Result<Estimate<T>> {
    if probes == 0 {
        return Err(Error::Argument("hutchinson_trace needs at least one probe".into()));
    }
    let d = oracle.dim();
    let zs: Vec<Vec<T>> = (0..probes)
        .map(|_| (0..d).map(|_| if rng.random::<bool>() { T::one() } else { -T::one() }).collect())
        .collect();
    let quads = zs
        .par_iter()
        .map(|z| oracle.hvp(theta, z).map(|hz| dot(z, &hz)))
        .collect::<Result<Vec<T>>>()?;
    Ok(mean_estimate(&quads))
}

/// Dense Hessian from `hvp` on the basis vectors, symmetrized.
pub fn assemble_hessian<T: Scalar>(oracle: &HvpOracle<'_, T>, theta: &[T]) -> Result<DMatrix<T>> {
    let d = oracle.dim();
    if d > MAX_DENSE_DIM {
        return Err(Error::Capability(format!(
            "dense Hessian of dimension {d} exceeds {MAX_DENSE_DIM}; estimate the trace with hutchinson_trace instead"
        )));
    }
    let columns = (0..d)
        .into_par_iter()
        .map(|k| {
            let mut e = vec![T::zero(); d];
            e[k] = T::one();
            oracle.hvp(theta, &e)
        })
        .collect::<Result<Vec<Vec<T>>>>()?;
    let h = DMatrix::from_fn(d, d, |i, j| columns[j][i]);
    Ok((&h + h.transpose()) * T::lit(0.5))
}

/// All eigenvalues of the assembled Hessian plus their summary.
pub fn full_spectrum<T: Scalar>(oracle: &HvpOracle<'_, T>, theta: &[T]) -> Result<SpectrumReport<T>> {
    let h = assemble_hessian(oracle, theta)?;
    spectrum_of(&h)
}

/// Summary of a symmetric matrix's spectrum.
pub fn spectrum_of<T: Scalar>(matrix: &DMatrix<T>) -> Result<SpectrumReport<T>> {
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let (eigenvalues, _) = T::symmetric_eigen(matrix);
    Ok(SpectrumReport::from_eigenvalues(eigenvalues, T::lit(SPECTRUM_RANK_TOL)))
}

/// One equilibrium sample for the negative-eigenvalue study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegeigPoint<T> {
    pub eta: T,
    pub batch: usize,
    pub loss: T,
    pub negative_sum: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegeigFit<T> {
    pub fit: LinearFit<T>,
    /// `|intercept|` relative to the spread of `negative_sum` across points.
    pub intercept_fraction: T,
}

/// Least-squares line `negative_sum = w * loss + b`. Points all at the origin
/// give the line through the origin with `w = 0` and `R^2 = 1`.
pub fn negative_sum_vs_loss<T: Scalar>(points: &[NegeigPoint<T>]) -> Result<NegeigFit<T>> {
    if points.len() < MIN_NEGEIG_POINTS {
        return Err(Error::Precondition(format!(
            "need at least {MIN_NEGEIG_POINTS} equilibrated states, got {}",
            points.len()
        )));
    }
    let x: Vec<T> = points.iter().map(|p| p.loss).collect();
    let y: Vec<T> = points.iter().map(|p| p.negative_sum).collect();
    if x.iter().chain(&y).all(|&v| v == T::zero()) {
        let fit = LinearFit {
            slope: T::zero(),
            intercept: T::zero(),
            r_squared: T::one(),
            slope_stderr: T::zero(),
            intercept_stderr: T::zero(),
            points: points.len(),
        };
        return Ok(NegeigFit { fit, intercept_fraction: T::zero() });
    }
    let fit = linear_fit(&x, &y)?;
    let lo = y.iter().copied().fold(T::infinity(), T::min);
    let hi = y.iter().copied().fold(T::neg_infinity(), T::max);
    let spread = hi - lo;
    let intercept_fraction = if spread > T::zero() { fit.intercept.abs() / spread } else { T::infinity() };
    Ok(NegeigFit { fit, intercept_fraction })
}

/// Settings for sampling equilibria of a valley model under SGD-aligned noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegeigStudy {
    /// `(eta, batch)` pairs, one equilibrium each.
    pub settings: Vec<(f64, usize)>,
    pub dataset: usize,
    pub steps_measure: usize,
    #[serde(default)]
    pub steps_burnin: Option<usize>,
    /// Spectra are taken every `stride` measured steps.
    pub stride: usize,
    pub ensemble_size: usize,
    pub seed: u64,
}

/// Time-and-ensemble averaged `(loss, negative_sum)` at each setting.
/// Spectra come from the analytic Hessian of the model.
pub fn negeig_study<T: Scalar>(model: &ValleyModel<T>, study: &NegeigStudy, theta0: &[T]) -> Result<Vec<NegeigPoint<T>>> {
    if study.stride == 0 {
        return Err(Error::Argument("stride must be at least 1".into()));
    }
    let oracle = HvpOracle::analytic(model);
    let mut points = Vec::with_capacity(study.settings.len());
    for (i, &(eta, batch)) in study.settings.iter().enumerate() {
        let config = SimulationConfig {
            eta,
            steps_burnin: study.steps_burnin,
            steps_measure: study.steps_measure,
            noise: NoiseSpec::SgdAligned { batch, dataset: study.dataset },
            seed: crate::seeds::derive_seed(study.seed, i as u64),
            ensemble_size: study.ensemble_size,
        };
        let records = run_ensemble(model, &config, theta0)?;
        if let Some(bad) = records.iter().find(|r| !r.valid) {
            return Err(Error::Precondition(format!(
                "run at eta = {eta}, S = {batch} left the valid region: {}",
                bad.abort_reason.as_deref().unwrap_or("unknown")
            )));
        }
        let samples = records
            .par_iter()
            .flat_map_iter(|r| (0..r.len()).step_by(study.stride).map(move |k| (r, k)))
            .map(|(r, k)| {
                let state = r.state_at(k);
                full_spectrum(&oracle, &state).map(|s| (r.loss[k], s.negative_sum))
            })
            .collect::<Result<Vec<(T, T)>>>()?;
        let losses: Vec<T> = samples.iter().map(|s| s.0 - model.base_loss()).collect();
        let negs: Vec<T> = samples.iter().map(|s| s.1).collect();
        points.push(NegeigPoint { eta: T::lit(eta), batch, loss: mean(&losses), negative_sum: mean(&negs) });
    }
    Ok(points)
}

/// Histogram CSV `bin_lo,bin_hi,count` over `bins` equal-width bins.
pub fn write_eigenvalue_histogram<T: Scalar, W: Write>(eigenvalues: &[T], bins: usize, writer: W) -> Result<()> {
    if bins == 0 || eigenvalues.is_empty() {
        return Err(Error::Argument("histogram needs at least one bin and one eigenvalue".into()));
    }
    let lo = eigenvalues.iter().copied().fold(T::infinity(), T::min);
    let hi = eigenvalues.iter().copied().fold(T::neg_infinity(), T::max);
    let width = if hi > lo { (hi - lo) / T::from_usize_lossy(bins) } else { T::one() };
    let mut counts = vec![0usize; bins];
    for &e in eigenvalues {
        let k = ((e - lo) / width).to_usize().unwrap_or(0).min(bins - 1);
        counts[k] += 1;
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bin_lo", "bin_hi", "count"])?;
    for (k, c) in counts.iter().enumerate() {
        let a = lo + width * T::from_usize_lossy(k);
        w.write_record([a.to_string(), (a + width).to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
