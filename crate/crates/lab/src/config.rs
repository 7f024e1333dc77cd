//! Experiment configuration: a TOML file with a `kind` and the sections that kind needs.
//! The schema is documented in `CONFIG.md` at the crate root.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgd_valley::minibatch::{Activation, Dataset, MlpSpec, TrainMode};
use sgd_valley::noise::stability_guard;
use sgd_valley::path::TraceEstimator;
use sgd_valley::seeds::derive_seed;
use sgd_valley::{NoiseSpec, SimulationConfig, ValleyModel, ValleySpec};

/// Named random streams split off the master seed with `derive_seed(master, stream)`.
pub mod stream {
    pub const SIMULATION: u64 = 0;
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAINING: u64 = 3;
    pub const ESTIMATOR: u64 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Equilibrium,
    TraceDrift,
    EtaSweep,
    Anticorr,
    Negeig,
    Alignment,
    ProjectedPath,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Equilibrium => "equilibrium",
            Kind::TraceDrift => "trace_drift",
            Kind::EtaSweep => "eta_sweep",
            Kind::Anticorr => "anticorr",
            Kind::Negeig => "negeig",
            Kind::Alignment => "alignment",
            Kind::ProjectedPath => "projected_path",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ValleySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<Simulation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anticorr: Option<Anticorr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negeig: Option<Negeig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<Network>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<Training>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Alignment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathSection>,
}

fn default_ensemble() -> usize {
    sgd_valley::dynamics::DEFAULT_ENSEMBLE
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Simulation {
    /// Required except for `eta_sweep`, which takes its rates from `[sweep]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    pub steps_measure: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_burnin: Option<usize>,
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    pub theta0: Vec<f64>,
    /// Keep every `csv_stride`-th step in per-run CSVs.
    #[serde(default = "one")]
    pub csv_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub etas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anticorr {
    pub batch: usize,
    pub dataset: usize,
    /// Isotropic noise level.
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Negeig {
    /// `[eta, batch]` pairs.
    pub settings: Vec<(f64, usize)>,
    pub dataset: usize,
    pub steps_measure: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_burnin: Option<usize>,
    pub stride: usize,
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    pub theta0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    /// Input width, hidden widths, number of classes.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub label_smoothing: f64,
    pub samples: usize,
    /// Gaussian-blob separation; ignored when IDX files are given.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx_labels: Option<PathBuf>,
}

fn default_separation() -> f64 {
    1.5
}

impl Network {
    pub fn spec(&self) -> MlpSpec {
        MlpSpec { widths: self.widths.clone(), activation: self.activation, label_smoothing: self.label_smoothing }
    }

    pub fn dataset(&self, seed: u64, base: &Path) -> sgd_valley::Result<Dataset<f64>> {
        match (&self.idx_images, &self.idx_labels) {
            (Some(images), Some(labels)) => Dataset::from_idx(&base.join(images), &base.join(labels), self.samples, seed),
            _ => Dataset::gaussian_blobs(self.samples, self.widths[0], *self.widths.last().unwrap_or(&0), self.separation, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Training {
    pub mode: TrainMode,
    pub eta: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Alignment {
    pub batches: Vec<usize>,
    /// Training steps (counted from initialization) at which to measure.
    pub checkpoints: Vec<usize>,
    /// Monte-Carlo draws when a batch size is too large to enumerate.
    #[serde(default = "default_mc_draws")]
    pub mc_draws: usize,
}

fn default_mc_draws() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSection {
    /// Fixed loss threshold; otherwise 1.05 times the loss after `reference_steps` of GD.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_steps: Option<usize>,
    /// Defaults to the learning rate of the trajectory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_eta: Option<f64>,
    pub max_steps: usize,
    pub coarse_stride: usize,
    /// Network paths only: full-batch GD steps at the projection rate before the recorded walk.
    #[serde(default)]
    pub pretrain_steps: usize,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
}

fn default_estimator() -> Estimator {
    Estimator::Exact {}
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Estimator {
    Exact {},
    Hutchinson { probes: usize },
}

impl Estimator {
    pub fn with_seed(self, seed: u64) -> TraceEstimator {
        match self {
            Estimator::Exact {} => TraceEstimator::Exact,
            Estimator::Hutchinson { probes } => TraceEstimator::Hutchinson { probes, seed },
        }
    }
}

/// Field-level problems found before anything runs.
#[derive(Debug, thiserror::Error)]
#[error("{}", .0.join("\n"))]
pub struct Invalid(pub Vec<String>);

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, Invalid> {
        toml::from_str(text).map_err(|e| Invalid(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self, Invalid> {
        let text = std::fs::read_to_string(path).map_err(|e| Invalid(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn seed_for(&self, stream: u64) -> u64 {
        derive_seed(self.seed, stream)
    }

    pub fn model(&self) -> sgd_valley::Result<ValleyModel<f64>> {
        let spec = match (&self.model, self.kind) {
            (Some(spec), _) => spec.clone(),
            (None, Kind::Anticorr) => ValleySpec::AnticorrToy {},
            (None, _) => ValleySpec::QuarticValley {},
        };
        spec.build()
    }

    /// Simulation settings at learning rate `eta`, seeded from the simulation stream.
    pub fn simulation_at(&self, eta: f64, noise: NoiseSpec) -> SimulationConfig {
        let sim = self.simulation.as_ref().expect("validated");
        SimulationConfig {
            eta,
            steps_burnin: sim.steps_burnin,
            steps_measure: sim.steps_measure,
            noise,
            seed: self.seed_for(stream::SIMULATION),
            ensemble_size: sim.ensemble_size,
        }
    }

    /// Checks every module precondition that can be checked without running,
    /// including the stability guard at each learning rate.
    pub fn validate(&self) -> Result<(), Invalid> {
        let mut v = Checker::default();
        let uses_network = self.network.is_some();
        let (need, allow): (&[&str], &[&str]) = match self.kind {
            Kind::Equilibrium | Kind::TraceDrift => (&["model", "noise", "simulation"], &[]),
            Kind::EtaSweep => (&["model", "noise", "simulation", "sweep"], &[]),
            Kind::Anticorr => (&["simulation", "anticorr"], &["model"]),
            Kind::Negeig => (&["negeig"], &["model"]),
            Kind::Alignment => (&["network", "training", "alignment"], &[]),
            Kind::ProjectedPath if uses_network => (&["network", "training", "path"], &[]),
            Kind::ProjectedPath => (&["model", "noise", "simulation", "path"], &[]),
        };
        let present = self.sections();
        for s in need {
            if !present.contains(s) {
                v.push(format!("[{s}] is required for kind = \"{}\"", self.kind.name()));
            }
        }
        for s in &present {
            if !need.contains(s) && !allow.contains(s) {
                v.push(format!("[{s}] is not used by kind = \"{}\"", self.kind.name()));
            }
        }
        if !v.0.is_empty() {
            return Err(Invalid(v.0));
        }

        match self.kind {
            Kind::Alignment => self.check_network(&mut v),
            Kind::ProjectedPath if uses_network => {
                self.check_network(&mut v);
                self.check_path(&mut v, None);
            }
            Kind::Negeig => self.check_negeig(&mut v),
            _ => self.check_valley(&mut v),
        }
        if v.0.is_empty() {
            Ok(())
        } else {
            Err(Invalid(v.0))
        }
    }

    fn sections(&self) -> Vec<&'static str> {
        let mut s = Vec::new();
        let mut add = |present: bool, name| {
            if present {
                s.push(name)
            }
        };
        add(self.model.is_some(), "model");
        add(self.noise.is_some(), "noise");
        add(self.simulation.is_some(), "simulation");
        add(self.sweep.is_some(), "sweep");
        add(self.anticorr.is_some(), "anticorr");
        add(self.negeig.is_some(), "negeig");
        add(self.network.is_some(), "network");
        add(self.training.is_some(), "training");
        add(self.alignment.is_some(), "alignment");
        add(self.path.is_some(), "path");
        s
    }

    fn check_valley(&self, v: &mut Checker) {
        let model = match self.model() {
            Ok(m) => m,
            Err(e) => return v.push(format!("model: {e}")),
        };
        let sim = self.simulation.as_ref().expect("required");
        if sim.csv_stride == 0 {
            v.push("simulation.csv_stride must be at least 1".into());
        }
        if sim.ensemble_size == 0 {
            v.push("simulation.ensemble_size must be at least 1".into());
        }
        let etas: Vec<f64> = match (self.kind, sim.eta) {
            (Kind::EtaSweep, Some(_)) => {
                return v.push("simulation.eta is not used by eta_sweep; list the rates in sweep.etas".into())
            }
            (Kind::EtaSweep, None) => {
                let etas = &self.sweep.as_ref().expect("required").etas;
                if etas.is_empty() {
                    v.push("sweep.etas must not be empty".into());
                }
                etas.clone()
            }
            (_, Some(eta)) => vec![eta],
            (_, None) => return v.push(format!("simulation.eta is required for kind = \"{}\"", self.kind.name())),
        };
        let noises = match (self.kind, &self.anticorr) {
            (Kind::Anticorr, Some(a)) => {
                vec![NoiseSpec::SgdAligned { batch: a.batch, dataset: a.dataset }, NoiseSpec::Isotropic { c: a.c }]
            }
            _ => vec![self.noise.clone().expect("required")],
        };
        let theta0 = &sim.theta0;
        for &eta in &etas {
            for noise in &noises {
                let config = SimulationConfig::new(eta, sim.steps_measure, noise.clone(), 0);
                if let Err(e) = config.validate(&model, theta0) {
                    v.push(format!("simulation at eta = {eta}, noise {noise:?}: {e}"));
                }
            }
        }
        if self.kind == Kind::ProjectedPath {
            self.check_path(v, Some((&model, theta0, etas[0])));
        }
    }

    fn check_negeig(&self, v: &mut Checker) {
        let model = match self.model() {
            Ok(m) => m,
            Err(e) => return v.push(format!("model: {e}")),
        };
        let n = self.negeig.as_ref().expect("required");
        if n.settings.len() < sgd_valley::spectrum::MIN_NEGEIG_POINTS {
            v.push(format!(
                "negeig.settings needs at least {} (eta, batch) pairs, got {}",
                sgd_valley::spectrum::MIN_NEGEIG_POINTS,
                n.settings.len()
            ));
        }
        if n.stride == 0 || n.ensemble_size == 0 {
            v.push("negeig.stride and negeig.ensemble_size must be at least 1".into());
        }
        for &(eta, batch) in &n.settings {
            let noise = NoiseSpec::SgdAligned { batch, dataset: n.dataset };
            if let Err(e) = SimulationConfig::new(eta, n.steps_measure, noise, 0).validate(&model, &n.theta0) {
                v.push(format!("negeig setting (eta = {eta}, batch = {batch}): {e}"));
            }
        }
    }

    fn check_network(&self, v: &mut Checker) {
        let net = self.network.as_ref().expect("required");
        if let Err(e) = net.spec().validate() {
            v.push(format!("network: {e}"));
        }
        if net.samples == 0 {
            v.push("network.samples must be at least 1".into());
        }
        if net.idx_images.is_some() != net.idx_labels.is_some() {
            v.push("network.idx_images and network.idx_labels must be given together".into());
        }
        let t = self.training.as_ref().expect("required");
        if !(t.eta > 0.0) {
            v.push(format!("training.eta must be positive, got {}", t.eta));
        }
        if let TrainMode::Sgd { batch } = t.mode {
            if batch == 0 || batch > net.samples {
                v.push(format!("training.mode.batch must satisfy 1 <= S <= samples ({}), got {batch}", net.samples));
            }
        }
        if let Some(a) = &self.alignment {
            if let Err(e) = net.spec().check_dense() {
                v.push(format!("alignment needs dense Hessians: {e}"));
            }
            if a.batches.is_empty() || a.checkpoints.is_empty() {
                v.push("alignment.batches and alignment.checkpoints must not be empty".into());
            }
            for &b in &a.batches {
                if b == 0 || b > net.samples {
                    v.push(format!("alignment batch {b} must satisfy 1 <= S <= samples ({})", net.samples));
                }
            }
            if a.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
                v.push("alignment.checkpoints must be strictly increasing".into());
            }
            if a.checkpoints.last().is_some_and(|&c| c > t.steps) {
                v.push(format!("alignment.checkpoints run past training.steps = {}", t.steps));
            }
            if a.mc_draws < 2 {
                v.push("alignment.mc_draws must be at least 2".into());
            }
        }
    }

    fn check_path(&self, v: &mut Checker, valley: Option<(&ValleyModel<f64>, &[f64], f64)>) {
        let p = self.path.as_ref().expect("required");
        if p.coarse_stride == 0 {
            v.push("path.coarse_stride must be at least 1".into());
        }
        match (p.threshold, p.reference_steps) {
            (Some(t), None) if t > 0.0 => {}
            (Some(t), None) => v.push(format!("path.threshold must be positive, got {t}")),
            (None, Some(_)) => {}
            _ => v.push("give exactly one of path.threshold and path.reference_steps".into()),
        }
        if let Estimator::Hutchinson { probes: 0 } = p.estimator {
            v.push("path.estimator.probes must be at least 1".into());
        }
        if let Some(eta) = p.projection_eta {
            if !(eta > 0.0) {
                v.push(format!("path.projection_eta must be positive, got {eta}"));
            }
        }
        if let Some((model, theta0, eta)) = valley {
            let eta = p.projection_eta.unwrap_or(eta);
            if let Ok((_, hat)) = model.split(theta0) {
                if let Err(e) = model.lambda_max(hat).and_then(|l| stability_guard(l, eta)) {
                    v.push(format!("path projection at eta = {eta}: {e}"));
                }
            }
        }
    }
}

#[derive(Default)]
struct Checker(Vec<String>);

impl Checker {
    fn push(&mut self, msg: String) {
        self.0.push(msg);
    }
}
