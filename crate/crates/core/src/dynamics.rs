//! GD / SGD-with-injected-noise trajectories on valley models.
//!
//! A run equilibrates the non-degenerate block for `steps_burnin` updates, then
//! records `steps_measure` states. Ensembles fan out over seeds derived from
//! the master seed (see [`crate::seeds`]).

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::noise::{stability_guard, NoiseCovariance, NoiseSpec, SpectralFunctional};
use crate::scalar::Scalar;
use crate::seeds::{derive_seeds, rng_from_seed};
use crate::stats::{batch_means, linear_fit, mean_estimate, sample_variance, weighted_linear_fit, Estimate, LinearFit};
use crate::valley::ValleyModel;

/// Burn-in is this many relaxation times `1 / (eta * lambda_min)` unless overridden.
pub const BURNIN_RELAXATION_TIMES: f64 = 20.0;
pub const DEFAULT_ENSEMBLE: usize = 10;
const VARIANCE_BATCHES: usize = 20;

fn default_ensemble() -> usize {
    DEFAULT_ENSEMBLE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub eta: f64,
    /// `None` uses [`default_burnin`] at the initial curvature.
    #[serde(default)]
    pub steps_burnin: Option<usize>,
    pub steps_measure: usize,
    pub noise: NoiseSpec,
    pub seed: u64,
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
}

impl SimulationConfig {
    pub fn new(eta: f64, steps_measure: usize, noise: NoiseSpec, seed: u64) -> Self {
        Self { eta, steps_burnin: None, steps_measure, noise, seed, ensemble_size: DEFAULT_ENSEMBLE }
    }

    pub fn with_burnin(mut self, steps: usize) -> Self {
        self.steps_burnin = Some(steps);
        self
    }

    pub fn with_ensemble(mut self, size: usize) -> Self {
        self.ensemble_size = size;
        self
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn seeds(&self) -> Vec<u64> {
        derive_seeds(self.seed, self.ensemble_size)
    }

    /// Checks the config against a model and starting point before anything runs.
    pub fn validate<T: Scalar>(&self, model: &ValleyModel<T>, theta0: &[T]) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Argument(format!("eta must be positive, got {}", self.eta)));
        }
        self.noise.validate()?;
        let (_, hat) = model.split(theta0)?;
        if theta0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("initial state is not finite".into()));
        }
        model.loss(theta0)?;
        stability_guard(model.lambda_max(hat)?, T::lit(self.eta))
    }
}

/// `ceil(20 / (eta * lambda_min))`.
pub fn default_burnin<T: Scalar>(eta: T, lambda_min: T) -> usize {
    if !(lambda_min > T::zero()) {
        return 0;
    }
    (T::lit(BURNIN_RELAXATION_TIMES) / (eta * lambda_min)).ceil().to_usize().unwrap_or(usize::MAX)
}

/// One update `theta' = theta - eta (grad L(theta) + xi)`, with `xi` drawn from the
/// design evaluated at the current curvatures and acting on `theta_bar` only.
pub fn step<T: Scalar, R: Rng + ?Sized>(
    model: &ValleyModel<T>,
    theta: &[T],
    eta: T,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<Vec<T>> {
    let (_, hat) = model.split(theta)?;
    let lambdas = model.lambdas(hat)?;
    for &l in &lambdas {
        stability_guard(l, eta)?;
    }
    let grad = model.gradient(theta)?;
    let variances = noise.variances_at(&lambdas)?;
    let mut next = theta.to_vec();
    for (i, (x, g)) in next.iter_mut().zip(&grad).enumerate() {
        let xi = match variances.get(i) {
            Some(&v) if v > T::zero() => v.sqrt() * T::standard_normal(rng),
            _ => T::zero(),
        };
        *x -= eta * (*g + xi);
    }
    Ok(next)
}

/// Like [`step`] with a fixed (possibly full) covariance over either the
/// non-degenerate block or the whole space.
pub fn step_with_covariance<T: Scalar, R: Rng + ?Sized>(
    model: &ValleyModel<T>,
    theta: &[T],
    eta: T,
    covariance: Option<&NoiseCovariance<T>>,
    rng: &mut R,
) -> Result<Vec<T>> {
    let (_, hat) = model.split(theta)?;
    for l in model.lambdas(hat)? {
        stability_guard(l, eta)?;
    }
    let grad = model.gradient(theta)?;
    let xi = match covariance {
        None => Vec::new(),
        Some(c) if c.dim() == model.n() || c.dim() == model.dim() => c.sample(rng),
        Some(c) => {
            return Err(Error::Argument(format!(
                "covariance of size {} fits neither n = {} nor N = {}",
                c.dim(),
                model.n(),
                model.dim()
            )))
        }
    };
    Ok(theta
        .iter()
        .zip(&grad)
        .enumerate()
        .map(|(i, (&x, &g))| x - eta * (g + xi.get(i).copied().unwrap_or(T::zero())))
        .collect())
}

/// Per-step series of one simulation, stored column-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord<T> {
    pub seed: u64,
    pub config_hash: String,
    pub n: usize,
    pub degenerate: usize,
    pub burnin_steps: usize,
    pub loss: Vec<T>,
    pub trace: Vec<T>,
    pub log_det: Vec<T>,
    /// Row-major, `n` values per step.
    pub theta_bar: Vec<T>,
    /// Row-major, `N - n` values per step.
    pub theta_hat: Vec<T>,
    pub theta_bar_norm2: Vec<T>,
    pub final_state: Vec<T>,
    pub valid: bool,
    pub abort_reason: Option<String>,
}

impl<T: Scalar> RunRecord<T> {
    pub fn len(&self) -> usize {
        self.loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss.is_empty()
    }

    pub fn theta_bar_at(&self, k: usize) -> &[T] {
        &self.theta_bar[k * self.n..(k + 1) * self.n]
    }

    pub fn theta_hat_at(&self, k: usize) -> &[T] {
        &self.theta_hat[k * self.degenerate..(k + 1) * self.degenerate]
    }

    /// Full parameter vector `(theta_bar, theta_hat)` after measured step `k`.
    pub fn state_at(&self, k: usize) -> Vec<T> {
        let mut s = self.theta_bar_at(k).to_vec();
        s.extend_from_slice(self.theta_hat_at(k));
        s
    }

    pub fn series(&self, observable: Observable) -> &[T] {
        match observable {
            Observable::Loss => &self.loss,
            Observable::Trace => &self.trace,
            Observable::LogDet => &self.log_det,
            Observable::ThetaBarNorm2 => &self.theta_bar_norm2,
        }
    }

    /// CSV with columns `step, loss, trace, log_det, theta_hat_0.., theta_bar_norm2`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        self.write_csv_every(writer, 1)
    }

    /// [`write_csv`](Self::write_csv) keeping only every `stride`-th step.
    pub fn write_csv_every<W: Write>(&self, writer: W, stride: usize) -> Result<()> {
        if stride == 0 {
            return Err(Error::Argument("CSV stride must be at least 1".into()));
        }
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["step".to_string(), "loss".into(), "trace".into(), "log_det".into()];
        header.extend((0..self.degenerate).map(|j| format!("theta_hat_{j}")));
        header.push("theta_bar_norm2".into());
        w.write_record(&header)?;
        for k in (0..self.len()).step_by(stride) {
            let mut row = vec![k.to_string(), self.loss[k].to_string(), self.trace[k].to_string(), self.log_det[k].to_string()];
            row.extend(self.theta_hat_at(k).iter().map(|v| v.to_string()));
            row.push(self.theta_bar_norm2[k].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    fn push_state(&mut self, model: &ValleyModel<T>, theta: &[T]) -> Result<()> {
        let (bar, hat) = model.split(theta)?;
        let spectrum = model.spectrum(hat)?;
        self.loss.push(model.loss(theta)?);
        self.trace.push(spectrum.trace);
        self.log_det.push(spectrum.log_det);
        self.theta_bar.extend_from_slice(bar);
        self.theta_hat.extend_from_slice(hat);
        self.theta_bar_norm2.push(bar.iter().map(|&x| x * x).sum());
        Ok(())
    }

    /// Ratio of the mean `||theta_bar||^2` over the second half of the series
    /// to that over the first half; near 1 when `theta_bar` is quasi-stationary.
    pub fn stationarity_ratio(&self) -> Option<T> {
        let half = self.len() / 2;
        if half == 0 {
            return None;
        }
        let first = crate::stats::mean(&self.theta_bar_norm2[..half]);
        let second = crate::stats::mean(&self.theta_bar_norm2[half..2 * half]);
        if first > T::zero() {
            Some(second / first)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    Loss,
    Trace,
    LogDet,
    ThetaBarNorm2,
}

impl From<SpectralFunctional> for Observable {
    fn from(f: SpectralFunctional) -> Self {
        match f {
            SpectralFunctional::Trace => Observable::Trace,
            SpectralFunctional::Logdet => Observable::LogDet,
        }
    }
}

/// Executes burn-in then measurement from `theta0` with `seed`.
///
/// A domain exit or instability mid-run does not fail the call: the partial
/// record comes back with `valid = false` and the reason attached.
pub fn run_seeded<T: Scalar>(model: &ValleyModel<T>, config: &SimulationConfig, theta0: &[T], seed: u64) -> Result<RunRecord<T>> {
    config.validate(model, theta0)?;
    let eta = T::lit(config.eta);
    let (_, hat0) = model.split(theta0)?;
    let lambda_min = model.lambdas(hat0)?.into_iter().fold(T::infinity(), T::min);
    let burnin = config.steps_burnin.unwrap_or_else(|| default_burnin(eta, lambda_min));
    let mut rng = rng_from_seed(seed);
    let mut record = RunRecord {
        seed,
        config_hash: config.hash(),
        n: model.n(),
        degenerate: model.degenerate_dim(),
        burnin_steps: burnin,
        loss: Vec::with_capacity(config.steps_measure),
        trace: Vec::with_capacity(config.steps_measure),
        log_det: Vec::with_capacity(config.steps_measure),
        theta_bar: Vec::with_capacity(config.steps_measure * model.n()),
        theta_hat: Vec::with_capacity(config.steps_measure * model.degenerate_dim()),
        theta_bar_norm2: Vec::with_capacity(config.steps_measure),
        final_state: theta0.to_vec(),
        valid: true,
        abort_reason: None,
    };
    let mut theta = theta0.to_vec();
    let total = burnin + config.steps_measure;
    for t in 0..total {
        let outcome = step(model, &theta, eta, &config.noise, &mut rng)
            .and_then(|next| if t >= burnin { record.push_state(model, &next).map(|_| next) } else { Ok(next) });
        match outcome {
            Ok(next) => theta = next,
            Err(e @ (Error::Domain(_) | Error::Instability { .. })) => {
                record.valid = false;
                record.abort_reason = Some(format!("step {t}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    record.final_state = theta;
    Ok(record)
}

/// [`run_seeded`] with the config's master seed used directly.
pub fn run<T: Scalar>(model: &ValleyModel<T>, config: &SimulationConfig, theta0: &[T]) -> Result<RunRecord<T>> {
    run_seeded(model, config, theta0, config.seed)
}

/// Runs `ensemble_size` independent members in parallel, one derived seed each.
pub fn run_ensemble<T: Scalar>(model: &ValleyModel<T>, config: &SimulationConfig, theta0: &[T]) -> Result<Vec<RunRecord<T>>> {
    config.validate(model, theta0)?;
    config.seeds().into_par_iter().map(|seed| run_seeded(model, config, theta0, seed)).collect()
}

fn usable<T: Scalar>(records: &[RunRecord<T>]) -> Result<Vec<&RunRecord<T>>> {
    if records.is_empty() {
        return Err(Error::Argument("empty ensemble".into()));
    }
    let ok: Vec<_> = records.iter().filter(|r| r.valid && !r.is_empty()).collect();
    if ok.is_empty() {
        return Err(Error::Argument("no valid run with measured steps in the ensemble".into()));
    }
    Ok(ok)
}

/// Time-and-ensemble average of `theta_i^2` with a batch-means standard error
/// (20 contiguous batches per run).
pub fn measure_equilibrium_variance<T: Scalar>(records: &[RunRecord<T>], coord: usize) -> Result<Estimate<T>> {
    let ok = usable(records)?;
    if coord >= ok[0].n {
        return Err(Error::Argument(format!("coordinate {coord} is not non-degenerate (n = {})", ok[0].n)));
    }
    let mut total = T::zero();
    let mut count = 0usize;
    let mut batches = Vec::new();
    for r in ok {
        let sq: Vec<T> = (0..r.len()).map(|k| r.theta_bar_at(k)[coord].powi(2)).collect();
        total += sq.iter().copied().sum::<T>();
        count += sq.len();
        let b = batch_means(&sq, VARIANCE_BATCHES);
        if b.is_empty() {
            batches.extend(sq);
        } else {
            batches.extend(b);
        }
    }
    let stderr = (sample_variance(&batches) / T::from_usize_lossy(batches.len())).sqrt();
    Ok(Estimate { mean: total / T::from_usize_lossy(count), stderr })
}

/// Least-squares slope of the observable against step index, per run, then
/// averaged over the ensemble. The standard error is the ensemble spread, or
/// the regression error when only one run is available.
pub fn measure_drift<T: Scalar>(records: &[RunRecord<T>], observable: Observable) -> Result<Estimate<T>> {
    let ok = usable(records)?;
    let mut fits = Vec::with_capacity(ok.len());
    for r in &ok {
        let y = r.series(observable);
        if y.len() < 2 {
            return Err(Error::Argument("drift needs at least two measured steps per run".into()));
        }
        let x: Vec<T> = (0..y.len()).map(T::from_usize_lossy).collect();
        fits.push(linear_fit(&x, y)?);
    }
    if fits.len() == 1 {
        return Ok(Estimate { mean: fits[0].slope, stderr: fits[0].slope_stderr });
    }
    let slopes: Vec<T> = fits.iter().map(|f| f.slope).collect();
    Ok(mean_estimate(&slopes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow<T> {
    pub eta: T,
    pub eta_squared: T,
    pub drift: T,
    pub stderr: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaSweep<T> {
    pub rows: Vec<SweepRow<T>>,
    /// Learning rates whose ensemble had an aborted run, with the first reason.
    pub excluded: Vec<(T, String)>,
}

impl<T: Scalar> EtaSweep<T> {
    fn columns(&self) -> (Vec<T>, Vec<T>, Vec<T>) {
        (
            self.rows.iter().map(|r| r.eta_squared).collect(),
            self.rows.iter().map(|r| r.drift).collect(),
            self.rows.iter().map(|r| r.stderr).collect(),
        )
    }

    /// Ordinary least squares of drift on `eta^2`, errors from the residuals.
    pub fn fit(&self) -> Result<LinearFit<T>> {
        let (x, y, _) = self.columns();
        linear_fit(&x, &y)
    }

    /// The same line weighted by the per-row standard errors, which must all be positive.
    pub fn weighted_fit(&self) -> Result<LinearFit<T>> {
        let (x, y, s) = self.columns();
        weighted_linear_fit(&x, &y, Some(&s))
    }
}

/// Equilibrates and measures the trace drift at each learning rate. Rate `i`
/// uses master seed `derive_seed(base.seed, i)` so that rows are independent.
pub fn eta_squared_sweep<T: Scalar>(
    model: &ValleyModel<T>,
    etas: &[f64],
    base: &SimulationConfig,
    theta0: &[T],
) -> Result<EtaSweep<T>> {
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (i, &eta) in etas.iter().enumerate() {
        let config = SimulationConfig { eta, seed: crate::seeds::derive_seed(base.seed, i as u64), ..base.clone() };
        let records = run_ensemble(model, &config, theta0)?;
        if let Some(bad) = records.iter().find(|r| !r.valid) {
            excluded.push((T::lit(eta), bad.abort_reason.clone().unwrap_or_default()));
            continue;
        }
        let drift = measure_drift(&records, Observable::Trace)?;
        rows.push(SweepRow { eta: T::lit(eta), eta_squared: T::lit(eta * eta), drift: drift.mean, stderr: drift.stderr });
    }
    Ok(EtaSweep { rows, excluded })
}

/// JSON-ready ensemble summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary<T> {
    pub observable: Observable,
    pub drift: T,
    pub stderr: T,
    pub predicted: Option<T>,
    pub config: SimulationConfig,
    pub seeds: Vec<u64>,
    pub valid_runs: usize,
    pub aborted: Vec<(u64, String)>,
}

pub fn summarize<T: Scalar>(
    records: &[RunRecord<T>],
    observable: Observable,
    config: &SimulationConfig,
    predicted: Option<T>,
) -> Result<EnsembleSummary<T>> {
    let drift = measure_drift(records, observable)?;
    Ok(EnsembleSummary {
        observable,
        drift: drift.mean,
        stderr: drift.stderr,
        predicted,
        config: config.clone(),
        seeds: records.iter().map(|r| r.seed).collect(),
        valid_runs: records.iter().filter(|r| r.valid).count(),
        aborted: records
            .iter()
            .filter(|r| !r.valid)
            .map(|r| (r.seed, r.abort_reason.clone().unwrap_or_default()))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn step_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let toy = ValleyModel::<f64>::trace_toy();
        let floor = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(step(&toy, &floor, 0.01, &NoiseSpec::None, &mut rng).unwrap(), floor.to_vec());
        let next = step(&toy, &[1.0; 4], 0.01, &NoiseSpec::None, &mut rng).unwrap();
        for (a, b) in next.iter().zip([0.96, 0.94, 0.98, 0.97]) {
            assert!((a - b).abs() < 1e-15);
        }
        let q = ValleyModel::<f64>::constant(&[1.0], 0).unwrap();
        assert!((step(&q, &[1.0], 0.1, &NoiseSpec::None, &mut rng).unwrap()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn step_enforces_stability_and_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = ValleyModel::<f64>::constant(&[30.0], 0).unwrap();
        assert!(matches!(step(&q, &[1.0], 0.1, &NoiseSpec::None, &mut rng), Err(Error::Instability { .. })));
        let toy = ValleyModel::<f64>::trace_toy();
        assert!(matches!(step(&toy, &[0.1, 0.1, 1.0, -1.0], 0.01, &NoiseSpec::None, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn step_with_full_covariance_matches_noiseless_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = ValleyModel::<f64>::constant(&[1.0, 2.0], 0).unwrap();
        let cov = NoiseCovariance::full(nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
        let n = 20_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let next = step_with_covariance(&q, &[1.0, 1.0], 0.1, Some(&cov), &mut rng).unwrap();
            acc[0] += next[0];
            acc[1] += next[1];
        }
        assert!((acc[0] / n as f64 - 0.9).abs() < 3e-3);
        assert!((acc[1] / n as f64 - 0.8).abs() < 3e-3);
        let wrong = NoiseCovariance::isotropic(3, 1.0).unwrap();
        assert!(step_with_covariance(&q, &[1.0, 1.0], 0.1, Some(&wrong), &mut rng).is_err());
    }

    #[test]
    fn zero_measure_steps_gives_empty_series() {
        let q = ValleyModel::<f64>::constant(&[1.0], 1).unwrap();
        let cfg = SimulationConfig::new(0.1, 0, NoiseSpec::Isotropic { c: 1.0 }, 4).with_burnin(50);
        let r = run(&q, &cfg, &[0.0, 0.0]).unwrap();
        assert!(r.is_empty() && r.valid);
        assert_ne!(r.final_state, vec![0.0, 0.0]);
    }

    #[test]
    fn noiseless_run_is_monotone_and_floor_is_fixed() {
        let ac = ValleyModel::<f64>::anticorr_toy();
        let cfg = SimulationConfig::new(0.05, 200, NoiseSpec::None, 1).with_burnin(0);
        let r = run(&ac, &cfg, &[1.0, -0.5, 0.3, 0.2]).unwrap();
        assert!(r.loss.windows(2).all(|w| w[1] <= w[0]));
        let floor = run(&ac, &cfg, &[0.0, 0.0, 0.3, 0.2]).unwrap();
        assert_eq!(floor.final_state, vec![0.0, 0.0, 0.3, 0.2]);
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let toy = ValleyModel::<f64>::trace_toy_locked(&[1.0, 1.0]).unwrap();
        let cfg = SimulationConfig::new(0.01, 300, NoiseSpec::SgdAligned { batch: 10, dataset: 100 }, 42);
        let a = run(&toy, &cfg, &[0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = run(&toy, &cfg, &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn region_exit_flags_partial_record() {
        // Start right next to the kink with strong drift.
        let toy = ValleyModel::<f64>::trace_toy_locked(&[1e-3, 1e-3]).unwrap();
        let cfg = SimulationConfig::new(0.4, 10_000, NoiseSpec::Isotropic { c: 4.0 }, 2).with_burnin(0);
        let r = run(&toy, &cfg, &[0.0, 0.0, 1e-3, 1e-3]).unwrap();
        assert!(!r.valid);
        assert!(r.abort_reason.as_deref().unwrap().contains("domain"));
        assert!(r.len() < 10_000);
    }

    #[test]
    fn noiseless_ensemble_measures_zero() {
        let q = ValleyModel::<f64>::constant(&[1.0], 1).unwrap();
        let cfg = SimulationConfig::new(0.1, 100, NoiseSpec::None, 3).with_ensemble(3);
        let rec = run_ensemble(&q, &cfg, &[0.0, 0.5]).unwrap();
        let v = measure_equilibrium_variance(&rec, 0).unwrap();
        assert_eq!((v.mean, v.stderr), (0.0, 0.0));
        let d = measure_drift(&rec, Observable::Trace).unwrap();
        assert_eq!((d.mean, d.stderr), (0.0, 0.0));
        assert!(measure_equilibrium_variance::<f64>(&[], 0).is_err());
        assert!(measure_equilibrium_variance(&rec, 1).is_err());
    }

    #[test]
    fn isotropic_variance_matches_prediction() {
        let q = ValleyModel::<f64>::constant(&[1.0], 0).unwrap();
        let cfg = SimulationConfig::new(0.1, 200_000, NoiseSpec::Isotropic { c: 1.0 }, 9).with_ensemble(4);
        let rec = run_ensemble(&q, &cfg, &[0.0]).unwrap();
        let v = measure_equilibrium_variance(&rec, 0).unwrap();
        let predicted = crate::noise::predicted_equilibrium_variance(1.0, 0.1, 1.0).unwrap();
        assert!((v.mean - predicted).abs() < 4.0 * v.stderr, "{v:?} vs {predicted}");
        assert!((v.mean - 5.263e-2).abs() / 5.263e-2 < 0.05);
    }

    #[test]
    fn sweep_singleton_and_constant_model() {
        let q = ValleyModel::<f64>::constant(&[1.0, 2.0], 2).unwrap();
        let base = SimulationConfig::new(0.01, 50, NoiseSpec::SgdAligned { batch: 5, dataset: 50 }, 1).with_ensemble(2);
        let one = eta_squared_sweep(&q, &[0.01], &base, &[0.0, 0.0, 0.1, 0.2]).unwrap();
        assert_eq!(one.rows.len(), 1);
        let all = eta_squared_sweep(&q, &[0.01, 0.02, 0.03], &base, &[0.0, 0.0, 0.1, 0.2]).unwrap();
        assert!(all.rows.iter().all(|r| r.drift == 0.0));
    }

    #[test]
    fn csv_has_expected_columns() {
        let toy = ValleyModel::<f64>::trace_toy_locked(&[1.0, 1.0]).unwrap();
        let cfg = SimulationConfig::new(0.01, 3, NoiseSpec::None, 1).with_burnin(0);
        let r = run(&toy, &cfg, &[0.1, 0.1, 1.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,loss,trace,log_det,theta_hat_0,theta_hat_1,theta_bar_norm2\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
