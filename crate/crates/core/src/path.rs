//! Projected optimization paths: map trajectory states to near-minima with
//! noiseless GD, check straight-line connectedness between consecutive
//! projections, refine by inserting projected midpoints, and track the
//! Hessian trace along the result.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::scalar::Scalar;
use crate::seeds::{derive_seed, rng_from_seed};
use crate::spectrum::{full_spectrum, hutchinson_trace, HvpOracle, MAX_DENSE_DIM};

/// Points sampled on each segment, endpoints included (`t = k / 9`).
pub const SEGMENT_SAMPLES: usize = 10;
/// The default threshold is this multiple of a GD reference loss.
pub const REFERENCE_MARGIN: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSettings {
    pub eta: f64,
    pub threshold: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathNode<T> {
    pub state: Vec<T>,
    pub origin_step: usize,
    pub projected_loss: T,
    pub gd_steps: usize,
}

/// Runs GD from `state` until the loss drops below the threshold.
pub fn project_state<T: Scalar>(
    objective: &dyn Objective<T>,
    state: &[T],
    origin_step: usize,
    settings: &ProjectionSettings,
) -> Result<PathNode<T>> {
    if state.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("cannot project a non-finite state".into()));
    }
    let eta = T::lit(settings.eta);
    let threshold = T::lit(settings.threshold);
    let mut x = state.to_vec();
    let mut loss = objective.loss(&x)?;
    let mut best = loss;
    for steps in 0..=settings.max_steps {
        if loss < threshold {
            return Ok(PathNode { state: x, origin_step, projected_loss: loss, gd_steps: steps });
        }
        if steps == settings.max_steps {
            break;
        }
        let g = objective.gradient(&x)?;
        for (xi, gi) in x.iter_mut().zip(g) {
            *xi -= eta * gi;
        }
        loss = objective.loss(&x)?;
        if !loss.is_finite() {
            break;
        }
        best = best.min(loss);
    }
    Err(Error::ProjectionFailure { steps: settings.max_steps, best_loss: best.as_f64(), threshold: settings.threshold })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Connection<T> {
    pub connected: bool,
    pub losses: Vec<T>,
    pub max_loss: T,
}

/// Loss at `t = k/9`, `k = 0..9`, on the segment from `a` to `b`; connected
/// iff every sample is at most `threshold`. Points where the loss cannot be
/// evaluated count as infinite.
pub fn line_connected<T: Scalar>(objective: &dyn Objective<T>, a: &[T], b: &[T], threshold: T) -> Connection<T> {
    let last = T::from_usize_lossy(SEGMENT_SAMPLES - 1);
    let losses: Vec<T> = (0..SEGMENT_SAMPLES)
        .map(|k| {
            let t = T::from_usize_lossy(k) / last;
            let point: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x + t * (y - x)).collect();
            objective.loss(&point).unwrap_or(T::infinity())
        })
        .collect();
    let max_loss = losses.iter().copied().fold(T::neg_infinity(), T::max);
    Connection { connected: losses.iter().all(|&l| l <= threshold), losses, max_loss }
}

/// States recorded at strictly increasing optimization steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    steps: Vec<usize>,
    states: Vec<Vec<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(steps: Vec<usize>, states: Vec<Vec<T>>) -> Result<Self> {
        if steps.is_empty() || steps.len() != states.len() {
            return Err(Error::Argument("trajectory needs one state per recorded step".into()));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("trajectory steps must be strictly increasing".into()));
        }
        Ok(Self { steps, states })
    }

    /// States recorded at every step `0, 1, 2, ...`.
    pub fn dense(states: Vec<Vec<T>>) -> Result<Self> {
        Self::new((0..states.len()).collect(), states)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, i: usize) -> usize {
        self.steps[i]
    }

    pub fn state(&self, i: usize) -> &[T] {
        &self.states[i]
    }

    /// Index of the recorded step nearest `floor((step_a + step_b)/2)` strictly
    /// between positions `a` and `b`.
    fn midpoint(&self, a: usize, b: usize) -> Option<usize> {
        if b <= a + 1 {
            return None;
        }
        let target = (self.steps[a] + self.steps[b]) / 2;
        (a + 1..b).min_by_key(|&i| (self.steps[i].abs_diff(target), self.steps[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Link<T> {
    Connected,
    /// No recorded step left between the endpoints and the segment still fails.
    Unresolved { max_loss: T },
    /// A midpoint could not be projected; the segment is unverified.
    ProjectionFailed { origin_step: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedPath<T> {
    pub nodes: Vec<PathNode<T>>,
    /// `links[i]` joins `nodes[i]` and `nodes[i + 1]`.
    pub links: Vec<Link<T>>,
    /// Coarse checkpoints whose projection failed and which were left out.
    pub dropped: Vec<usize>,
}

impl<T: Scalar> RefinedPath<T> {
    pub fn connected_fraction(&self) -> f64 {
        if self.links.is_empty() {
            return 1.0;
        }
        self.links.iter().filter(|l| matches!(l, Link::Connected)).count() as f64 / self.links.len() as f64
    }

    pub fn fully_verified(&self) -> bool {
        self.dropped.is_empty() && self.links.iter().all(|l| matches!(l, Link::Connected))
    }
}

struct Refiner<'a, T: Scalar> {
    objective: &'a dyn Objective<T>,
    trajectory: &'a Trajectory<T>,
    settings: ProjectionSettings,
    cache: HashMap<usize, Result<PathNode<T>>>,
}

impl<T: Scalar> Refiner<'_, T> {
    fn project(&mut self, i: usize) -> Result<PathNode<T>> {
        if let Some(done) = self.cache.get(&i) {
            return clone_result(done);
        }
        let r = project_state(self.objective, self.trajectory.state(i), self.trajectory.step(i), &self.settings);
        self.cache.insert(i, clone_result(&r));
        r
    }

    fn refine(&mut self, a: usize, b: usize, node_a: &PathNode<T>, node_b: PathNode<T>, path: &mut RefinedPath<T>) -> Result<()> {
        let threshold = T::lit(self.settings.threshold);
        let conn = line_connected(self.objective, &node_a.state, &node_b.state, threshold);
        if conn.connected {
            path.links.push(Link::Connected);
            path.nodes.push(node_b);
            return Ok(());
        }
        let Some(c) = self.trajectory.midpoint(a, b) else {
            path.links.push(Link::Unresolved { max_loss: conn.max_loss });
            path.nodes.push(node_b);
            return Ok(());
        };
        match self.project(c) {
            Ok(node_c) => {
                self.refine(a, c, node_a, node_c.clone(), path)?;
                self.refine(c, b, &node_c, node_b, path)
            }
            Err(Error::ProjectionFailure { .. }) => {
                path.links.push(Link::ProjectionFailed { origin_step: self.trajectory.step(c) });
                path.nodes.push(node_b);
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

fn clone_result<T: Clone>(r: &Result<T>) -> Result<T> {
    match r {
        Ok(v) => Ok(v.clone()),
        Err(Error::ProjectionFailure { steps, best_loss, threshold }) => {
            Err(Error::ProjectionFailure { steps: *steps, best_loss: *best_loss, threshold: *threshold })
        }
        Err(e) => Err(Error::Numerical(e.to_string())),
    }
}

/// Projects every `coarse_stride`-th recorded state (and the last one), then
/// bisects each disconnected pair on the recorded trajectory until it is
/// connected or no recorded step remains between the endpoints.
pub fn refine_path<T: Scalar>(
    objective: &dyn Objective<T>,
    trajectory: &Trajectory<T>,
    coarse_stride: usize,
    settings: &ProjectionSettings,
) -> Result<RefinedPath<T>> {
    if coarse_stride == 0 {
        return Err(Error::Argument("coarse stride must be at least 1".into()));
    }
    let mut coarse: Vec<usize> = (0..trajectory.len()).step_by(coarse_stride).collect();
    if *coarse.last().unwrap() != trajectory.len() - 1 {
        coarse.push(trajectory.len() - 1);
    }
    let projected: Vec<(usize, Result<PathNode<T>>)> = coarse
        .par_iter()
        .map(|&i| (i, project_state(objective, trajectory.state(i), trajectory.step(i), settings)))
        .collect();
    let mut refiner = Refiner { objective, trajectory, settings: *settings, cache: HashMap::new() };
    let mut path = RefinedPath { nodes: Vec::new(), links: Vec::new(), dropped: Vec::new() };
    let mut anchors = Vec::new();
    for (i, r) in projected {
        match &r {
            Ok(node) => anchors.push((i, node.clone())),
            Err(Error::ProjectionFailure { .. }) => path.dropped.push(trajectory.step(i)),
            Err(e) => return Err(Error::Numerical(format!("projection at step {}: {e}", trajectory.step(i)))),
        }
        refiner.cache.insert(i, r);
    }
    let Some((first_i, first)) = anchors.first().cloned() else {
        return Ok(path);
    };
    path.nodes.push(first);
    let mut prev = first_i;
    for (i, node) in anchors.into_iter().skip(1) {
        let node_a = path.nodes.last().unwrap().clone();
        refiner.refine(prev, i, &node_a, node, &mut path)?;
        prev = i;
    }
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEstimator {
    /// Dense spectrum (only below the dense-assembly threshold).
    Exact,
    Hutchinson { probes: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint<T> {
    pub origin_step: usize,
    pub trace: T,
    pub stderr: T,
}

fn oracle_for<'a, T: Scalar>(objective: &'a dyn Objective<T>, theta: &[T]) -> HvpOracle<'a, T> {
    let zero = vec![T::zero(); theta.len()];
    match objective.hessian_vector_product(theta, &zero) {
        Some(_) => HvpOracle::analytic(objective),
        None => HvpOracle::finite_difference(objective),
    }
}

/// Hessian trace at each node, in node order.
pub fn trace_along_path<T: Scalar>(
    objective: &dyn Objective<T>,
    nodes: &[PathNode<T>],
    estimator: TraceEstimator,
) -> Result<Vec<TracePoint<T>>> {
    nodes
        .par_iter()
        .enumerate()
        .map(|(i, node)| {
            let oracle = oracle_for(objective, &node.state);
            let (trace, stderr) = match estimator {
                TraceEstimator::Exact if objective.dim() <= MAX_DENSE_DIM => (full_spectrum(&oracle, &node.state)?.trace, T::zero()),
                TraceEstimator::Exact => {
                    return Err(Error::Capability(format!(
                        "exact traces need dim <= {MAX_DENSE_DIM}; use the Hutchinson estimator"
                    )))
                }
                TraceEstimator::Hutchinson { probes, seed } => {
                    let mut rng = rng_from_seed(derive_seed(seed, i as u64));
                    let e = hutchinson_trace(&oracle, &node.state, probes, &mut rng)?;
                    (e.mean, e.stderr)
                }
            };
            Ok(TracePoint { origin_step: node.origin_step, trace, stderr })
        })
        .collect()
}

/// `1.05` times the loss after `steps` of GD from `start`.
pub fn reference_threshold<T: Scalar>(objective: &dyn Objective<T>, start: &[T], eta: f64, steps: usize) -> Result<T> {
    let eta_t = T::lit(eta);
    let mut x = start.to_vec();
    for _ in 0..steps {
        let g = objective.gradient(&x)?;
        for (xi, gi) in x.iter_mut().zip(g) {
            *xi -= eta_t * gi;
        }
    }
    Ok(T::lit(REFERENCE_MARGIN) * objective.loss(&x)?)
}

/// CSV `origin_step, projected_loss, gd_steps_used, connected_to_next, trace, trace_stderr`.
/// Trace columns are blank when `traces` is `None`; `connected_to_next` is blank on the last node.
pub fn write_path_report<T: Scalar, W: Write>(path: &RefinedPath<T>, traces: Option<&[TracePoint<T>]>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["origin_step", "projected_loss", "gd_steps_used", "connected_to_next", "trace", "trace_stderr"])?;
    for (i, node) in path.nodes.iter().enumerate() {
        let link = path.links.get(i).map(|l| matches!(l, Link::Connected).to_string()).unwrap_or_default();
        let (tr, se) = traces
            .and_then(|t| t.get(i))
            .map(|t| (t.trace.to_string(), t.stderr.to_string()))
            .unwrap_or_default();
        w.write_record([node.origin_step.to_string(), node.projected_loss.to_string(), node.gd_steps.to_string(), link, tr, se])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::FnObjective;
    use crate::valley::ValleyModel;

    fn settings(threshold: f64) -> ProjectionSettings {
        ProjectionSettings { eta: 0.1, threshold, max_steps: 10_000 }
    }

    #[test]
    fn projection_examples() {
        let toy = ValleyModel::<f64>::anticorr_toy();
        let floor = [0.0, 0.0, 0.3, -0.2];
        let node = project_state(&toy, &floor, 4, &settings(1e-8)).unwrap();
        assert_eq!((node.gd_steps, node.state.as_slice()), (0, floor.as_slice()));
        let node = project_state(&toy, &[0.01, -0.01, 0.3, -0.2], 0, &settings(1e-12)).unwrap();
        assert!(node.projected_loss < 1e-12 && node.gd_steps > 0);
        assert!((node.state[2] - 0.3).abs() < 1e-3 && (node.state[3] + 0.2).abs() < 1e-3);
        let short = ProjectionSettings { eta: 0.1, threshold: 1e-12, max_steps: 3 };
        match project_state(&toy, &[0.5, 0.5, 0.0, 0.0], 0, &short) {
            Err(Error::ProjectionFailure { steps, best_loss, .. }) => assert!(steps == 3 && best_loss > 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn projection_never_increases_loss() {
        let toy = ValleyModel::<f64>::anticorr_toy();
        let mut x = vec![0.3, -0.4, 0.2, 0.1];
        let mut prev = toy.loss(&x).unwrap();
        for _ in 0..500 {
            let g = toy.gradient(&x).unwrap();
            x.iter_mut().zip(g).for_each(|(a, b)| *a -= 0.1 * b);
            let l = toy.loss(&x).unwrap();
            assert!(l <= prev);
            prev = l;
        }
    }

    /// Two wells at x = -1 and x = +1 separated by a bump at 0.
    fn double_well() -> FnObjective<f64> {
        FnObjective::new(1, |x: &[f64]| (x[0] * x[0] - 1.0).powi(2), |x| vec![4.0 * x[0] * (x[0] * x[0] - 1.0)])
    }

    #[test]
    fn connectedness_examples() {
        let toy = ValleyModel::<f64>::anticorr_toy();
        let a = [0.0, 0.0, 0.1, 0.2];
        assert!(line_connected(&toy, &a, &a, 0.0).connected);
        let c = line_connected(&toy, &a, &[0.0, 0.0, -1.0, 3.0], 0.0);
        assert!(c.connected && c.losses.len() == 10 && c.losses.iter().all(|&l| l == 0.0));
        let w = double_well();
        let c = line_connected(&w, &[-1.0], &[1.0], 0.01);
        assert!(!c.connected);
        assert!((c.max_loss - (1.0 / 81.0 - 1.0f64).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn refinement_flags_adjacent_barrier() {
        let w = double_well();
        let traj = Trajectory::dense(vec![vec![-1.0], vec![1.0]]).unwrap();
        let p = refine_path(&w, &traj, 1, &settings(1e-6)).unwrap();
        assert_eq!(p.nodes.len(), 2);
        assert!(matches!(p.links[0], Link::Unresolved { .. }));
        assert!(!p.fully_verified());
    }

    #[test]
    fn refinement_leaves_connected_pairs_alone() {
        let toy = ValleyModel::<f64>::anticorr_toy();
        let traj = Trajectory::dense((0..5).map(|k| vec![0.0, 0.0, 0.1 * k as f64, 0.0]).collect()).unwrap();
        let p = refine_path(&toy, &traj, 4, &settings(1e-10)).unwrap();
        assert_eq!(p.nodes.iter().map(|n| n.origin_step).collect::<Vec<_>>(), vec![0, 4]);
        assert!(p.fully_verified());
    }

    #[test]
    fn refinement_inserts_midpoints_until_connected() {
        // Walk along a curved floor: the unit circle of a ring-shaped valley.
        let ring = FnObjective::<f64>::new(
            2,
            |x: &[f64]| (x[0] * x[0] + x[1] * x[1] - 1.0).powi(2),
            |x| {
                let r = x[0] * x[0] + x[1] * x[1] - 1.0;
                vec![4.0 * r * x[0], 4.0 * r * x[1]]
            },
        );
        let states: Vec<Vec<f64>> = (0..=64).map(|k| {
            let a = std::f64::consts::PI * k as f64 / 64.0;
            vec![a.cos(), a.sin()]
        }).collect();
        let traj = Trajectory::dense(states).unwrap();
        let p = refine_path(&ring, &traj, 64, &ProjectionSettings { eta: 0.05, threshold: 1e-3, max_steps: 1000 }).unwrap();
        assert!(p.fully_verified());
        assert!(p.nodes.len() > 2);
        assert!(p.nodes.windows(2).all(|w| w[0].origin_step < w[1].origin_step));
    }

    #[test]
    fn exact_trace_on_floor_matches_lambdas() {
        let toy = ValleyModel::<f64>::anticorr_toy();
        let nodes: Vec<PathNode<f64>> = (0..4)
            .map(|k| PathNode { state: vec![0.0, 0.0, 0.2 * k as f64, -0.1], origin_step: k, projected_loss: 0.0, gd_steps: 0 })
            .collect();
        let tr = trace_along_path(&toy, &nodes, TraceEstimator::Exact).unwrap();
        for (t, n) in tr.iter().zip(&nodes) {
            let expected: f64 = toy.lambdas(&n.state[2..]).unwrap().iter().sum();
            assert!((t.trace - expected).abs() < 1e-10);
        }
        let h = trace_along_path(&toy, &nodes, TraceEstimator::Hutchinson { probes: 200, seed: 1 }).unwrap();
        for (t, n) in h.iter().zip(&nodes) {
            let expected: f64 = toy.lambdas(&n.state[2..]).unwrap().iter().sum();
            assert!((t.trace - expected).abs() <= 3.0 * t.stderr + 1e-12);
        }
    }

    #[test]
    fn report_columns() {
        let w = double_well();
        let traj = Trajectory::dense(vec![vec![-1.0], vec![1.0]]).unwrap();
        let p = refine_path(&w, &traj, 1, &settings(1e-6)).unwrap();
        let mut buf = Vec::new();
        write_path_report(&p, None, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "origin_step,projected_loss,gd_steps_used,connected_to_next,trace,trace_stderr");
        assert!(lines[1].starts_with("0,0,0,false"));
    }
}
