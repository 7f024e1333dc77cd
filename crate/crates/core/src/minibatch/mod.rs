//! Minibatch-noise laboratory on a small MLP: exact and sampled minibatch
//! gradient moments, the SGD covariance formulas, and the decomposition of the
//! loss Hessian into a gradient second moment minus a curvature term.

mod data;
mod mlp;

pub use data::{read_idx_images, read_idx_labels, DataSource, Dataset};
pub use mlp::{smoothed_cross_entropy, smoothed_target, Activation, ForwardPass, Mlp, MlpObjective, MlpSpec};

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::scalar::{norm, Scalar};
use crate::seeds::rng_from_seed;
use crate::spectrum::{assemble_hessian, HvpOracle};

/// Largest number of size-`S` subsets [`enumerate_minibatch_moments`] will visit.
pub const MAX_ENUMERATED_BATCHES: u128 = 100_000;
const CHUNK: usize = 1024;

/// Mean of per-sample gradients over `indices`.
pub fn minibatch_gradient<T: Scalar>(objective: &MlpObjective<T>, params: &[T], indices: &[usize]) -> Result<Vec<T>> {
    if indices.is_empty() {
        return Err(Error::Argument("minibatch must not be empty".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&k| k >= objective.data.len()) {
        return Err(Error::Argument(format!("sample index {bad} out of range for M = {}", objective.data.len())));
    }
    let grads = indices
        .par_iter()
        .map(|&k| objective.mlp.sample_gradient(params, objective.data.input(k), objective.data.label(k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(average(&grads))
}

fn average<T: Scalar>(rows: &[Vec<T>]) -> Vec<T> {
    let mut acc = vec![T::zero(); rows[0].len()];
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = T::from_usize_lossy(rows.len());
    acc.into_iter().map(|a| a / n).collect()
}

fn check_rows<T: Scalar>(per_sample: &[Vec<T>]) -> Result<usize> {
    let p = per_sample.first().map(Vec::len).ok_or_else(|| Error::Argument("no per-sample gradients".into()))?;
    if per_sample.iter().any(|g| g.len() != p) {
        return Err(Error::Argument("per-sample gradients differ in length".into()));
    }
    Ok(p)
}

fn check_batch(batch: usize, m: usize) -> Result<()> {
    if batch < 1 || batch > m {
        return Err(Error::Argument(format!("batch size must satisfy 1 <= S <= M (S = {batch}, M = {m})")));
    }
    Ok(())
}

fn binomial(m: usize, s: usize) -> u128 {
    let s = s.min(m - s) as u128;
    let mut out: u128 = 1;
    for i in 0..s {
        out = out.saturating_mul(m as u128 - i) / (i + 1);
        if out > MAX_ENUMERATED_BATCHES * 1000 {
            return u128::MAX;
        }
    }
    out
}

/// Mean and covariance of minibatch-mean gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct MinibatchMoments<T: Scalar> {
    pub mean: Vec<T>,
    pub covariance: DMatrix<T>,
    pub batches: usize,
    /// `true` when every subset was enumerated.
    pub exact: bool,
}

fn outer_accumulate<T: Scalar>(acc: &mut DMatrix<T>, v: &[T]) {
    let p = v.len();
    for j in 0..p {
        for i in 0..p {
            acc[(i, j)] += v[i] * v[j];
        }
    }
}

fn batch_mean<T: Scalar>(per_sample: &[Vec<T>], combo: &[usize]) -> Vec<T> {
    let mut acc = vec![T::zero(); per_sample[0].len()];
    for &k in combo {
        for (a, &v) in acc.iter_mut().zip(&per_sample[k]) {
            *a += v;
        }
    }
    let s = T::from_usize_lossy(combo.len());
    acc.into_iter().map(|a| a / s).collect()
}

fn moments_over<T: Scalar>(per_sample: &[Vec<T>], combos: &[Vec<usize>], exact: bool) -> MinibatchMoments<T> {
    let p = per_sample[0].len();
    let count = T::from_usize_lossy(combos.len());
    // Fixed-size chunks summed in order keep the result independent of the thread count.
    let partial: Vec<Vec<T>> = combos
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![T::zero(); p];
            for c in chunk {
                for (a, v) in acc.iter_mut().zip(batch_mean(per_sample, c)) {
                    *a += v;
                }
            }
            acc
        })
        .collect();
    let mut mean = vec![T::zero(); p];
    for part in partial {
        for (a, v) in mean.iter_mut().zip(part) {
            *a += v;
        }
    }
    for a in mean.iter_mut() {
        *a /= count;
    }
    let partial: Vec<DMatrix<T>> = combos
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = DMatrix::zeros(p, p);
            for c in chunk {
                let d: Vec<T> = batch_mean(per_sample, c).iter().zip(&mean).map(|(&g, &m)| g - m).collect();
                outer_accumulate(&mut acc, &d);
            }
            acc
        })
        .collect();
    let mut covariance = DMatrix::zeros(p, p);
    for part in partial {
        covariance += part;
    }
    MinibatchMoments { mean, covariance: covariance / count, batches: combos.len(), exact }
}

/// Exact moments over all `binom(M, S)` subsets drawn without replacement.
pub fn enumerate_minibatch_moments<T: Scalar>(per_sample: &[Vec<T>], batch: usize) -> Result<MinibatchMoments<T>> {
    check_rows(per_sample)?;
    let m = per_sample.len();
    check_batch(batch, m)?;
    let total = binomial(m, batch);
    if total > MAX_ENUMERATED_BATCHES {
        return Err(Error::Capability(format!(
            "binom({m}, {batch}) subsets exceed {MAX_ENUMERATED_BATCHES}; use sample_minibatch_moments"
        )));
    }
    let combos: Vec<Vec<usize>> = (0..m).combinations(batch).collect();
    Ok(moments_over(per_sample, &combos, true))
}

/// Monte-Carlo moments over `draws` random subsets.
pub fn sample_minibatch_moments<T: Scalar, R: Rng + ?Sized>(
    per_sample: &[Vec<T>],
    batch: usize,
    draws: usize,
    rng: &mut R,
) -> Result<MinibatchMoments<T>> {
    check_rows(per_sample)?;
    let m = per_sample.len();
    check_batch(batch, m)?;
    if draws < 2 {
        return Err(Error::Argument("Monte-Carlo moments need at least 2 draws".into()));
    }
    let combos: Vec<Vec<usize>> = (0..draws).map(|_| sample_indices(rng, m, batch).into_vec()).collect();
    Ok(moments_over(per_sample, &combos, false))
}

/// `(1/M) sum_k g_k g_k^T`.
pub fn second_moment<T: Scalar>(per_sample: &[Vec<T>]) -> Result<DMatrix<T>> {
    let p = check_rows(per_sample)?;
    let mut acc = DMatrix::zeros(p, p);
    for g in per_sample {
        outer_accumulate(&mut acc, g);
    }
    Ok(acc / T::from_usize_lossy(per_sample.len()))
}

/// `(1/M) sum_k (g_k - g_mean)(g_k - g_mean)^T`.
pub fn population_covariance<T: Scalar>(per_sample: &[Vec<T>]) -> Result<DMatrix<T>> {
    let p = check_rows(per_sample)?;
    let mean = average(per_sample);
    let mut acc = DMatrix::zeros(p, p);
    for g in per_sample {
        let d: Vec<T> = g.iter().zip(&mean).map(|(&a, &b)| a - b).collect();
        outer_accumulate(&mut acc, &d);
    }
    Ok(acc / T::from_usize_lossy(per_sample.len()))
}

/// Covariance of the without-replacement minibatch mean:
/// `(1/S) ((M - S)/(M - 1))` times the population covariance.
pub fn exact_sgd_covariance<T: Scalar>(per_sample: &[Vec<T>], batch: usize) -> Result<DMatrix<T>> {
    let m = per_sample.len();
    check_batch(batch, m)?;
    let pop = population_covariance(per_sample)?;
    if m == 1 {
        return Ok(pop * T::zero());
    }
    let (s, mm) = (T::from_usize_lossy(batch), T::from_usize_lossy(m));
    Ok(pop * ((mm - s) / ((mm - T::one()) * s)))
}

/// The uncentered approximation `(1/S)(1 - S/M) (1/M) sum_k g_k g_k^T`.
pub fn paper_formula_covariance<T: Scalar>(per_sample: &[Vec<T>], batch: usize) -> Result<DMatrix<T>> {
    let m = per_sample.len();
    check_batch(batch, m)?;
    let (s, mm) = (T::from_usize_lossy(batch), T::from_usize_lossy(m));
    Ok(second_moment(per_sample)? * ((T::one() - s / mm) / s))
}

/// `||a - b||_F / ||b||_F`; zero when both vanish.
pub fn relative_frobenius_gap<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let diff = frobenius(&(a - b));
    let base = frobenius(b);
    if base > T::zero() {
        diff / base
    } else if diff == T::zero() {
        T::zero()
    } else {
        T::infinity()
    }
}

pub fn frobenius<T: Scalar>(m: &DMatrix<T>) -> T {
    m.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Largest eigenvalue magnitude of a symmetric matrix.
pub fn spectral_norm<T: Scalar>(m: &DMatrix<T>) -> T {
    let (eigs, _) = T::symmetric_eigen(&((m + m.transpose()) * T::lit(0.5)));
    eigs.into_iter().fold(T::zero(), |a, e| a.max(e.abs()))
}

/// `H = second_moment - curvature_term`, where with targets `q` and
/// `g_c = grad log p_c`
///
/// * `second_moment = (1/M) sum_k sum_c q_c g_c g_c^T`
/// * `curvature_term = (1/M) sum_k sum_c (q_c / p_c) hess p_c`.
///
/// Without label smoothing `q` is one-hot, the first term is the uncentered
/// per-sample gradient second moment and the second is the mean of
/// `(1/f) hess f` with `f` the probability of the true class.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianDecomposition<T: Scalar> {
    pub hessian: DMatrix<T>,
    pub second_moment: DMatrix<T>,
    pub curvature_term: DMatrix<T>,
    /// `||H - (second_moment - curvature_term)||_F / ||H||_F`.
    pub relative_residual: T,
    /// Spectral norm of the curvature term over that of the second moment.
    pub curvature_ratio: T,
}

/// Builds each term independently: the Hessian and `hess p_c` by central
/// differences of analytic gradients, the second moment from analytic
/// `grad log p_c`.
pub fn hessian_decomposition<T: Scalar>(objective: &MlpObjective<T>, params: &[T]) -> Result<HessianDecomposition<T>> {
    objective.mlp.spec().check_dense()?;
    let p = objective.dim();
    let hessian = assemble_hessian(&HvpOracle::finite_difference(objective), params)?;
    let h = HvpOracle::<T>::default_step(params);
    let per_sample = (0..objective.data.len())
        .into_par_iter()
        .map(|k| -> Result<(DMatrix<T>, DMatrix<T>)> {
            let x = objective.data.input(k);
            let q = objective.mlp.target(objective.data.label(k));
            let (probs, grads) = objective.mlp.log_prob_gradients(params, x)?;
            let mut first = DMatrix::zeros(p, p);
            let mut second = DMatrix::zeros(p, p);
            for (c, &qc) in q.iter().enumerate() {
                if qc == T::zero() {
                    continue;
                }
                let scaled: Vec<T> = grads[c].iter().map(|&g| g * qc.sqrt()).collect();
                outer_accumulate(&mut first, &scaled);
                let mut shifted = params.to_vec();
                for j in 0..p {
                    shifted[j] = params[j] + h;
                    let up = objective.mlp.prob_gradient(&shifted, x, c)?;
                    shifted[j] = params[j] - h;
                    let down = objective.mlp.prob_gradient(&shifted, x, c)?;
                    shifted[j] = params[j];
                    let w = qc / (probs[c] * (h + h));
                    for i in 0..p {
                        second[(i, j)] += w * (up[i] - down[i]);
                    }
                }
            }
            Ok((first, second))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut second_moment = DMatrix::zeros(p, p);
    let mut curvature_term = DMatrix::zeros(p, p);
    for (a, b) in per_sample {
        second_moment += a;
        curvature_term += b;
    }
    let m = T::from_usize_lossy(objective.data.len());
    second_moment /= m;
    curvature_term = (&curvature_term + curvature_term.transpose()) * (T::lit(0.5) / m);
    let residual = &hessian - (&second_moment - &curvature_term);
    let hnorm = frobenius(&hessian);
    let relative_residual = if hnorm > T::zero() { frobenius(&residual) / hnorm } else { frobenius(&residual) };
    let sm = spectral_norm(&second_moment);
    let curvature_ratio = if sm > T::zero() { spectral_norm(&curvature_term) / sm } else { T::infinity() };
    Ok(HessianDecomposition { hessian, second_moment, curvature_term, relative_residual, curvature_ratio })
}

/// Discrepancies between the SGD covariance formulas and the Hessian at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport<T> {
    pub batch: usize,
    pub dataset: usize,
    pub loss: T,
    pub mean_gradient_norm: T,
    /// Whether the exact covariance came from full enumeration.
    pub enumerated: bool,
    /// `||paper - exact||_F / ||exact||_F`.
    pub formula_gap: T,
    /// Relative difference of the two covariances' largest eigenvalues.
    pub formula_spectral_gap: T,
    /// `||exact - k H||_F / ||k H||_F` with `k = (1/S)(1 - S/M)`.
    pub covariance_hessian_gap: T,
    pub hessian_residual: T,
    pub curvature_ratio: T,
}

/// Compares the uncentered covariance formula, the exact (or sampled)
/// minibatch covariance and the scaled Hessian at `params`.
pub fn alignment_check<T: Scalar>(
    objective: &MlpObjective<T>,
    params: &[T],
    batch: usize,
    mc_draws: usize,
    seed: u64,
) -> Result<AlignmentReport<T>> {
    let m = objective.data.len();
    check_batch(batch, m)?;
    let per_sample = objective.per_sample_gradients(params)?;
    let paper = paper_formula_covariance(&per_sample, batch)?;
    let exact = match enumerate_minibatch_moments(&per_sample, batch) {
        Ok(moments) => moments,
        Err(Error::Capability(_)) => sample_minibatch_moments(&per_sample, batch, mc_draws, &mut rng_from_seed(seed))?,
        Err(e) => return Err(e),
    };
    let decomposition = hessian_decomposition(objective, params)?;
    let (s, mm) = (T::from_usize_lossy(batch), T::from_usize_lossy(m));
    let scaled_h = &decomposition.hessian * ((T::one() - s / mm) / s);
    let (pn, en) = (spectral_norm(&paper), spectral_norm(&exact.covariance));
    let formula_spectral_gap = if en > T::zero() {
        (pn - en).abs() / en
    } else if pn == T::zero() {
        T::zero()
    } else {
        T::infinity()
    };
    Ok(AlignmentReport {
        batch,
        dataset: m,
        loss: objective.loss(params)?,
        mean_gradient_norm: norm(&average(&per_sample)),
        enumerated: exact.exact,
        formula_gap: relative_frobenius_gap(&paper, &exact.covariance),
        formula_spectral_gap,
        covariance_hessian_gap: relative_frobenius_gap(&exact.covariance, &scaled_h),
        hessian_residual: decomposition.relative_residual,
        curvature_ratio: decomposition.curvature_ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainMode {
    Gd,
    Sgd { batch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub mode: TrainMode,
    pub eta: f64,
    pub steps: usize,
    /// Stop once the full training loss drops below this.
    #[serde(default)]
    pub stop_loss: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Keep the parameters after every iteration.
    #[serde(default)]
    pub record_trajectory: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    pub params: Vec<T>,
    /// Full training loss before the first step and after each step taken.
    pub losses: Vec<T>,
    pub steps_taken: usize,
    pub reached_stop_loss: bool,
    /// Parameters before the first step and after each step, when recorded.
    pub trajectory: Vec<Vec<T>>,
}

/// Plain GD or SGD (batches drawn without replacement from a seeded stream).
/// A loss above ten times the initial loss aborts with a divergence error.
pub fn train<T: Scalar>(objective: &MlpObjective<T>, params0: &[T], settings: &TrainSettings) -> Result<TrainOutcome<T>> {
    if params0.len() != objective.dim() || params0.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("initial parameters must be finite and match the network".into()));
    }
    if !(settings.eta >= 0.0) {
        return Err(Error::Argument(format!("learning rate must be non-negative, got {}", settings.eta)));
    }
    let m = objective.data.len();
    if let TrainMode::Sgd { batch } = settings.mode {
        check_batch(batch, m)?;
    }
    let eta = T::lit(settings.eta);
    let stop = settings.stop_loss.map(T::lit);
    let mut rng = rng_from_seed(settings.seed);
    let mut params = params0.to_vec();
    let initial = objective.loss(&params)?;
    let mut losses = vec![initial];
    let mut trajectory = if settings.record_trajectory { vec![params.clone()] } else { Vec::new() };
    let all: Vec<usize> = (0..m).collect();
    let mut reached = stop.is_some_and(|s| initial < s);
    let mut taken = 0;
    while !reached && taken < settings.steps {
        let grad = match settings.mode {
            TrainMode::Gd => minibatch_gradient(objective, &params, &all)?,
            TrainMode::Sgd { batch } => minibatch_gradient(objective, &params, &sample_indices(&mut rng, m, batch).into_vec())?,
        };
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= eta * g;
        }
        taken += 1;
        let loss = objective.loss(&params)?;
        if !loss.is_finite() || loss > T::lit(10.0) * initial {
            return Err(Error::Divergence { step: taken, loss: loss.as_f64(), initial: initial.as_f64() });
        }
        losses.push(loss);
        if settings.record_trajectory {
            trajectory.push(params.clone());
        }
        reached = stop.is_some_and(|s| loss < s);
    }
    Ok(TrainOutcome { params, losses, steps_taken: taken, reached_stop_loss: reached, trajectory })
}
