//! One runner per experiment kind. Each writes its artifacts through [`Artifacts`].

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use sgd_valley::checkpoint::save_checkpoint;
use sgd_valley::dynamics::summarize;
use sgd_valley::minibatch::{alignment_check, train, Mlp, MlpObjective, TrainMode, TrainSettings};
use sgd_valley::noise::{predicted_equilibrium_variance, predicted_functional_drift, predicted_trace_drift};
use sgd_valley::objective::Objective;
use sgd_valley::path::{reference_threshold, Link, refine_path, trace_along_path, write_path_report};
use sgd_valley::seeds::derive_seed;
use sgd_valley::spectrum::{negative_sum_vs_loss, negeig_study, NegeigStudy};
use sgd_valley::stats::spearman;
use sgd_valley::{
    eta_squared_sweep, measure_equilibrium_variance, run_ensemble, NoiseSpec, Observable, ProjectionSettings, RunRecord,
    SimulationConfig, SpectralFunctional, Trajectory, ValleyModel,
};

use crate::artifacts::Artifacts;
use crate::config::{stream, ExperimentConfig, Kind};

/// Runs the configured experiment. `base` resolves relative data paths.
pub fn execute(cfg: &ExperimentConfig, base: &Path, art: &mut Artifacts) -> Result<()> {
    art.seed("master", cfg.seed);
    match cfg.kind {
        Kind::Equilibrium => equilibrium(cfg, art),
        Kind::TraceDrift => trace_drift(cfg, art),
        Kind::EtaSweep => eta_sweep(cfg, art),
        Kind::Anticorr => anticorr(cfg, art),
        Kind::Negeig => negeig(cfg, art),
        Kind::Alignment => alignment(cfg, base, art),
        Kind::ProjectedPath if cfg.network.is_some() => network_path(cfg, base, art),
        Kind::ProjectedPath => valley_path(cfg, art),
    }
}

fn ensemble(
    cfg: &ExperimentConfig,
    model: &ValleyModel<f64>,
    noise: NoiseSpec,
    group: &str,
    art: &mut Artifacts,
) -> Result<(SimulationConfig, Vec<RunRecord<f64>>)> {
    let sim = cfg.simulation.as_ref().expect("validated");
    let config = cfg.simulation_at(sim.eta.expect("validated"), noise);
    art.seed("simulation", config.seed);
    art.seed("runs", config.seeds());
    let records = run_ensemble(model, &config, &sim.theta0)?;
    art.runs(group, &records, sim.csv_stride)?;
    Ok((config, records))
}

#[derive(Serialize)]
struct EquilibriumRow {
    coord: usize,
    lambda: f64,
    noise_variance: f64,
    measured: f64,
    stderr: f64,
    predicted: f64,
    relative_error: f64,
}

fn equilibrium(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let model = cfg.model()?;
    let noise = cfg.noise.clone().expect("validated");
    let (config, records) = ensemble(cfg, &model, noise.clone(), "runs", art)?;
    let (_, hat) = model.split(&cfg.simulation.as_ref().expect("validated").theta0)?;
    let lambdas = model.lambdas(hat)?;
    let variances = noise.variances_at(&lambdas)?;
    let mut rows = Vec::new();
    for (i, (&lambda, &var)) in lambdas.iter().zip(&variances).enumerate() {
        let measured = measure_equilibrium_variance(&records, i)?;
        let predicted = predicted_equilibrium_variance(lambda, config.eta, var)?;
        let relative_error = if predicted != 0.0 { (measured.mean - predicted) / predicted } else { measured.mean };
        rows.push(EquilibriumRow {
            coord: i,
            lambda,
            noise_variance: var,
            measured: measured.mean,
            stderr: measured.stderr,
            predicted,
            relative_error,
        });
    }
    art.csv("equilibrium.csv", &rows)
}

/// Leading-order drift predictions at `hat` for the designs that have one.
fn predictions(model: &ValleyModel<f64>, hat: &[f64], eta: f64, noise: &NoiseSpec) -> (Option<f64>, Option<f64>) {
    match *noise {
        NoiseSpec::SgdAligned { batch, dataset } => (predicted_trace_drift(model, hat, eta, batch, dataset).ok(), None),
        NoiseSpec::FDesigned { f: SpectralFunctional::Trace } => {
            (predicted_functional_drift(model, hat, eta, SpectralFunctional::Trace).ok(), None)
        }
        NoiseSpec::FDesigned { f: SpectralFunctional::Logdet } => {
            (None, predicted_functional_drift(model, hat, eta, SpectralFunctional::Logdet).ok())
        }
        NoiseSpec::None => (Some(0.0), Some(0.0)),
        NoiseSpec::Isotropic { .. } => (None, None),
    }
}

fn drift_summary(
    model: &ValleyModel<f64>,
    config: &SimulationConfig,
    records: &[RunRecord<f64>],
    theta0: &[f64],
) -> Result<serde_json::Value> {
    let (_, hat) = model.split(theta0)?;
    let (trace_pred, logdet_pred) = predictions(model, hat, config.eta, &config.noise);
    Ok(json!({
        "trace": summarize(records, Observable::Trace, config, trace_pred)?,
        "log_det": summarize(records, Observable::LogDet, config, logdet_pred)?,
    }))
}

fn trace_drift(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let model = cfg.model()?;
    let (config, records) = ensemble(cfg, &model, cfg.noise.clone().expect("validated"), "runs", art)?;
    let theta0 = &cfg.simulation.as_ref().expect("validated").theta0;
    let summary = drift_summary(&model, &config, &records, theta0)?;
    art.json("summary.json", &summary)
}

fn eta_sweep(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let model = cfg.model()?;
    let sim = cfg.simulation.as_ref().expect("validated");
    let etas = &cfg.sweep.as_ref().expect("validated").etas;
    let base = cfg.simulation_at(etas[0], cfg.noise.clone().expect("validated"));
    art.seed("simulation", base.seed);
    art.seed("rates", (0..etas.len() as u64).map(|i| derive_seed(base.seed, i)).collect::<Vec<_>>());
    let sweep = eta_squared_sweep(&model, etas, &base, &sim.theta0)?;
    art.csv("sweep.csv", &sweep.rows)?;
    let fit = if sweep.rows.len() >= 3 { Some(sweep.fit()?) } else { None };
    art.json("fit.json", &json!({ "ols": fit, "excluded": sweep.excluded }))
}

fn anticorr(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let model = cfg.model()?;
    let a = cfg.anticorr.as_ref().expect("validated");
    let theta0 = &cfg.simulation.as_ref().expect("validated").theta0;
    let mut summary = serde_json::Map::new();
    let designs = [
        ("sgd_aligned", NoiseSpec::SgdAligned { batch: a.batch, dataset: a.dataset }),
        ("isotropic", NoiseSpec::Isotropic { c: a.c }),
    ];
    for (group, noise) in designs {
        let (config, records) = ensemble(cfg, &model, noise, group, art)?;
        summary.insert(group.into(), drift_summary(&model, &config, &records, theta0)?);
    }
    art.json("summary.json", &summary)
}

fn negeig(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let model = cfg.model()?;
    let n = cfg.negeig.as_ref().expect("validated");
    let study = NegeigStudy {
        settings: n.settings.clone(),
        dataset: n.dataset,
        steps_measure: n.steps_measure,
        steps_burnin: n.steps_burnin,
        stride: n.stride,
        ensemble_size: n.ensemble_size,
        seed: cfg.seed_for(stream::SIMULATION),
    };
    art.seed("simulation", study.seed);
    let points = negeig_study(&model, &study, &n.theta0)?;
    art.csv("negeig.csv", &points)?;
    let fit = negative_sum_vs_loss(&points)?;
    art.json("fit.json", &fit)
}

fn network(cfg: &ExperimentConfig, base: &Path, art: &mut Artifacts) -> Result<(MlpObjective<f64>, Vec<f64>)> {
    let net = cfg.network.as_ref().expect("validated");
    let (data_seed, init_seed) = (cfg.seed_for(stream::DATA), cfg.seed_for(stream::INIT));
    art.seed("data", data_seed);
    art.seed("init", init_seed);
    let data = net.dataset(data_seed, base).context("loading the dataset")?;
    let mlp = Mlp::new(net.spec())?;
    let params = mlp.init_params(init_seed);
    Ok((MlpObjective::new(mlp, data)?, params))
}

#[derive(Serialize)]
struct AlignmentRow {
    step: usize,
    batch: usize,
    dataset: usize,
    loss: f64,
    mean_gradient_norm: f64,
    enumerated: bool,
    formula_gap: f64,
    formula_spectral_gap: f64,
    covariance_hessian_gap: f64,
    hessian_residual: f64,
    curvature_ratio: f64,
}

fn alignment(cfg: &ExperimentConfig, base: &Path, art: &mut Artifacts) -> Result<()> {
    let (objective, mut params) = network(cfg, base, art)?;
    let t = cfg.training.as_ref().expect("validated");
    let a = cfg.alignment.as_ref().expect("validated");
    let (train_seed, est_seed) = (cfg.seed_for(stream::TRAINING), cfg.seed_for(stream::ESTIMATOR));
    art.seed("training", train_seed);
    art.seed("estimator", est_seed);
    let spec = cfg.network.as_ref().expect("validated").spec();
    let mut rows = Vec::new();
    let mut losses = vec![(0usize, objective.loss(&params)?)];
    let mut step = 0;
    for (k, &checkpoint) in a.checkpoints.iter().enumerate() {
        let settings = TrainSettings {
            mode: t.mode,
            eta: t.eta,
            steps: checkpoint - step,
            stop_loss: None,
            seed: derive_seed(train_seed, k as u64),
            record_trajectory: false,
        };
        let out = train(&objective, &params, &settings)?;
        losses.extend(out.losses.iter().skip(1).enumerate().map(|(i, &l)| (step + i + 1, l)));
        params = out.params;
        step = checkpoint;
        let dir = art.dir.join("checkpoints");
        let name = format!("step_{checkpoint}");
        let loss = objective.loss(&params)?;
        save_checkpoint(&dir, &name, &spec, checkpoint, loss, &params)?;
        art.written.push(format!("checkpoints/{name}.json"));
        art.written.push(format!("checkpoints/{name}.bin"));
        for (j, &batch) in a.batches.iter().enumerate() {
            let seed = derive_seed(est_seed, (k * a.batches.len() + j) as u64);
            let r = alignment_check(&objective, &params, batch, a.mc_draws, seed)?;
            rows.push(AlignmentRow {
                step: checkpoint,
                batch: r.batch,
                dataset: r.dataset,
                loss: r.loss,
                mean_gradient_norm: r.mean_gradient_norm,
                enumerated: r.enumerated,
                formula_gap: r.formula_gap,
                formula_spectral_gap: r.formula_spectral_gap,
                covariance_hessian_gap: r.covariance_hessian_gap,
                hessian_residual: r.hessian_residual,
                curvature_ratio: r.curvature_ratio,
            });
        }
        // Rewritten at every checkpoint so an abort keeps what was measured.
        art.written.retain(|f| f != "alignment.csv");
        art.csv("alignment.csv", &rows)?;
    }
    #[derive(Serialize)]
    struct LossRow {
        step: usize,
        loss: f64,
    }
    let curve: Vec<LossRow> = losses.into_iter().map(|(step, loss)| LossRow { step, loss }).collect();
    art.csv("training_loss.csv", &curve)
}

fn finish_path(
    cfg: &ExperimentConfig,
    objective: &dyn Objective<f64>,
    trajectory: Trajectory<f64>,
    reference_start: &[f64],
    default_eta: f64,
    art: &mut Artifacts,
) -> Result<()> {
    let p = cfg.path.as_ref().expect("validated");
    let eta = p.projection_eta.unwrap_or(default_eta);
    let threshold = match (p.threshold, p.reference_steps) {
        (Some(t), _) => t,
        (None, Some(steps)) => reference_threshold(objective, reference_start, eta, steps)?,
        (None, None) => unreachable!("validated"),
    };
    let settings = ProjectionSettings { eta, threshold, max_steps: p.max_steps };
    let path = refine_path(objective, &trajectory, p.coarse_stride, &settings)?;
    let est_seed = cfg.seed_for(stream::ESTIMATOR);
    art.seed("estimator", est_seed);
    let traces = trace_along_path(objective, &path.nodes, p.estimator.with_seed(est_seed))?;
    write_path_report(&path, Some(&traces), art.file("path.csv")?)?;
    let steps: Vec<f64> = traces.iter().map(|t| t.origin_step as f64).collect();
    let values: Vec<f64> = traces.iter().map(|t| t.trace).collect();
    let correlation = spearman(&steps, &values).ok();
    let unverified: Vec<_> = path
        .links
        .iter()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Link::Connected))
        .map(|(i, l)| json!({ "from_node": i, "link": l }))
        .collect();
    art.json(
        "summary.json",
        &json!({
            "threshold": threshold,
            "projection_eta": eta,
            "trajectory_length": trajectory.len(),
            "nodes": path.nodes.len(),
            "connected_fraction": path.connected_fraction(),
            "fully_verified": path.fully_verified(),
            "dropped_checkpoints": path.dropped,
            "links": path.links.len(),
            "unverified_links": unverified,
            "trace_vs_step": correlation,
        }),
    )
}

fn valley_path(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let model = cfg.model()?;
    let sim = cfg.simulation.as_ref().expect("validated");
    let eta = sim.eta.expect("validated");
    let config = cfg.simulation_at(eta, cfg.noise.clone().expect("validated")).with_ensemble(1);
    art.seed("simulation", config.seed);
    let run_seed = config.seeds()[0];
    art.seed("runs", [run_seed]);
    let record = sgd_valley::dynamics::run_seeded(&model, &config, &sim.theta0, run_seed)?;
    art.runs("runs", std::slice::from_ref(&record), sim.csv_stride)?;
    if record.is_empty() {
        anyhow::bail!("the trajectory run recorded no states");
    }
    let states: Vec<Vec<f64>> = (0..record.len()).map(|k| record.state_at(k)).collect();
    finish_path(cfg, &model, Trajectory::dense(states)?, &record.final_state, eta, art)
}

fn network_path(cfg: &ExperimentConfig, base: &Path, art: &mut Artifacts) -> Result<()> {
    let (objective, params0) = network(cfg, base, art)?;
    let t = cfg.training.as_ref().expect("validated");
    let p = cfg.path.as_ref().expect("validated");
    let train_seed = cfg.seed_for(stream::TRAINING);
    art.seed("training", train_seed);
    let eta = p.projection_eta.unwrap_or(t.eta);
    let pretrain = TrainSettings {
        mode: TrainMode::Gd,
        eta,
        steps: p.pretrain_steps,
        stop_loss: None,
        seed: 0,
        record_trajectory: false,
    };
    let start = train(&objective, &params0, &pretrain)?.params;
    let walk = TrainSettings {
        mode: t.mode,
        eta: t.eta,
        steps: t.steps,
        stop_loss: t.stop_loss,
        seed: train_seed,
        record_trajectory: true,
    };
    let out = train(&objective, &start, &walk)?;
    #[derive(Serialize)]
    struct LossRow {
        step: usize,
        loss: f64,
    }
    let curve: Vec<LossRow> = out.losses.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
    art.csv("training_loss.csv", &curve)?;
    finish_path(cfg, &objective, Trajectory::dense(out.trajectory)?, &start, t.eta, art)
}
