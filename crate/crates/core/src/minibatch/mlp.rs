//! Fully-connected tanh classifier with label-smoothed cross entropy.
//!
//! Parameters live in one flat vector. Layer `l` maps `widths[l]` inputs to
//! `widths[l + 1]` outputs and stores its weight matrix row-major followed by
//! its bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::scalar::Scalar;
use crate::seeds::rng_from_seed;
use crate::spectrum::MAX_DENSE_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// Input width, hidden widths, number of classes.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub label_smoothing: f64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, label_smoothing: f64) -> Result<Self> {
        let spec = Self { widths, activation: Activation::Tanh, label_smoothing };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Argument(format!("MLP widths must be >= 2 positive layer sizes, got {:?}", self.widths)));
        }
        if *self.widths.last().unwrap() < 2 {
            return Err(Error::Argument("a classifier needs at least 2 output classes".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Argument(format!("label smoothing must lie in [0, 1), got {}", self.label_smoothing)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Errors if dense Hessians of this network would be refused.
    pub fn check_dense(&self) -> Result<()> {
        let p = self.param_count();
        if p > MAX_DENSE_DIM {
            return Err(Error::Capability(format!("{p} parameters exceed the dense threshold {MAX_DENSE_DIM}")));
        }
        Ok(())
    }
}

/// Architecture only; parameters are passed in.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    spec: MlpSpec,
    smoothing: T,
}

/// Per-layer activations of one forward pass; the last entry holds the logits.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub activations: Vec<Vec<T>>,
    pub log_probs: Vec<T>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn probs(&self) -> Vec<T> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn logits(&self) -> &[T] {
        self.activations.last().unwrap()
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let smoothing = T::lit(spec.label_smoothing);
        Ok(Self { spec, smoothing })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Gaussian init with variance `1 / fan_in`, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<T> {
        let mut rng = rng_from_seed(seed);
        self.init_params_with(&mut rng)
    }

    pub fn init_params_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for w in self.spec.widths.windows(2) {
            let scale = T::one() / T::from_usize_lossy(w[0]).sqrt();
            out.extend((0..w[0] * w[1]).map(|_| scale * T::standard_normal(rng)));
            out.extend(std::iter::repeat_n(T::zero(), w[1]));
        }
        out
    }

    fn check_params(&self, params: &[T]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Argument(format!("expected {} parameters, got {}", self.param_count(), params.len())));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[T], x: &[T]) -> Result<ForwardPass<T>> {
        self.check_params(params)?;
        if x.len() != self.spec.input_dim() {
            return Err(Error::Argument(format!("input has {} features, network expects {}", x.len(), self.spec.input_dim())));
        }
        let layers = self.spec.widths.len() - 1;
        let mut activations = vec![x.to_vec()];
        let mut off = 0;
        for (l, w) in self.spec.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &params[off..off + fan_in * fan_out];
            let bias = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let prev = activations.last().unwrap();
            let z: Vec<T> = (0..fan_out)
                .map(|r| bias[r] + weights[r * fan_in..(r + 1) * fan_in].iter().zip(prev).map(|(&a, &b)| a * b).sum::<T>())
                .collect();
            activations.push(if l + 1 < layers { z.into_iter().map(|v| v.tanh()).collect() } else { z });
        }
        let logits = activations.last().unwrap();
        let top = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = top + logits.iter().map(|&z| (z - top).exp()).sum::<T>().ln();
        let log_probs = logits.iter().map(|&z| z - lse).collect();
        Ok(ForwardPass { activations, log_probs })
    }

    /// Parameter gradient of `sum_c dlogits_c * logit_c` for the given pass.
    pub fn backward(&self, params: &[T], pass: &ForwardPass<T>, dlogits: &[T]) -> Vec<T> {
        let widths = &self.spec.widths;
        let mut grad = vec![T::zero(); self.param_count()];
        let mut offsets = Vec::with_capacity(widths.len() - 1);
        let mut off = 0;
        for w in widths.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = dlogits.to_vec();
        for l in (0..widths.len() - 1).rev() {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let off = offsets[l];
            let input = &pass.activations[l];
            for r in 0..fan_out {
                for c in 0..fan_in {
                    grad[off + r * fan_in + c] = delta[r] * input[c];
                }
                grad[off + fan_in * fan_out + r] = delta[r];
            }
            if l > 0 {
                let weights = &params[off..off + fan_in * fan_out];
                delta = (0..fan_in)
                    .map(|c| {
                        let back: T = (0..fan_out).map(|r| weights[r * fan_in + c] * delta[r]).sum();
                        back * (T::one() - input[c] * input[c])
                    })
                    .collect();
            }
        }
        grad
    }

    /// Smoothed target `q = (1 - eps) onehot(y) + eps / K`.
    pub fn target(&self, label: usize) -> Vec<T> {
        smoothed_target(label, self.spec.classes(), self.smoothing)
    }

    pub fn sample_loss(&self, params: &[T], x: &[T], label: usize) -> Result<T> {
        let pass = self.forward(params, x)?;
        Ok(-self.target(label).iter().zip(&pass.log_probs).map(|(&q, &lp)| q * lp).sum::<T>())
    }

    pub fn sample_gradient(&self, params: &[T], x: &[T], label: usize) -> Result<Vec<T>> {
        let pass = self.forward(params, x)?;
        let dlogits: Vec<T> = pass.probs().iter().zip(self.target(label)).map(|(&p, q)| p - q).collect();
        Ok(self.backward(params, &pass, &dlogits))
    }

    /// `grad log p_c(x)` for every class `c`, plus the probabilities.
    pub fn log_prob_gradients(&self, params: &[T], x: &[T]) -> Result<(Vec<T>, Vec<Vec<T>>)> {
        let pass = self.forward(params, x)?;
        let p = pass.probs();
        let grads = (0..p.len())
            .map(|c| {
                let seed: Vec<T> = p.iter().enumerate().map(|(j, &pj)| if j == c { T::one() - pj } else { -pj }).collect();
                self.backward(params, &pass, &seed)
            })
            .collect();
        Ok((p, grads))
    }

    /// `grad p_c(x)`.
    pub fn prob_gradient(&self, params: &[T], x: &[T], class: usize) -> Result<Vec<T>> {
        let pass = self.forward(params, x)?;
        let p = pass.probs();
        let seed: Vec<T> = p.iter().enumerate().map(|(j, &pj)| p[class] * (if j == class { T::one() } else { T::zero() } - pj)).collect();
        Ok(self.backward(params, &pass, &seed))
    }

    pub fn accuracy(&self, params: &[T], data: &Dataset<T>) -> Result<f64> {
        let mut hits = 0;
        for k in 0..data.len() {
            let pass = self.forward(params, data.input(k))?;
            let best = pass
                .log_probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i);
            hits += usize::from(best == Some(data.label(k)));
        }
        Ok(hits as f64 / data.len() as f64)
    }
}

pub fn smoothed_target<T: Scalar>(label: usize, classes: usize, eps: T) -> Vec<T> {
    let floor = eps / T::from_usize_lossy(classes);
    (0..classes).map(|c| if c == label { T::one() - eps + floor } else { floor }).collect()
}

/// `-sum_c q_c log p_c` for given probabilities. Zero probabilities are clamped
/// to the smallest positive normal value, with a warning.
pub fn smoothed_cross_entropy<T: Scalar>(probs: &[T], label: usize, eps: T) -> Result<T> {
    if label >= probs.len() {
        return Err(Error::Argument(format!("label {label} out of range for {} classes", probs.len())));
    }
    if !(eps >= T::zero() && eps <= T::one()) {
        return Err(Error::Argument(format!("label smoothing must lie in [0, 1], got {eps}")));
    }
    let q = smoothed_target(label, probs.len(), eps);
    let mut loss = T::zero();
    for (c, (&p, &qc)) in probs.iter().zip(&q).enumerate() {
        if qc == T::zero() {
            continue;
        }
        let p = if p < T::min_positive_value() {
            log::warn!("probability of class {c} underflowed ({p}); clamped");
            T::min_positive_value()
        } else {
            p
        };
        loss -= qc * p.ln();
    }
    Ok(loss)
}

/// Mean training loss of an [`Mlp`] on a fixed dataset, as an [`Objective`]
/// over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct MlpObjective<T: Scalar> {
    pub mlp: Mlp<T>,
    pub data: Dataset<T>,
}

impl<T: Scalar> MlpObjective<T> {
    pub fn new(mlp: Mlp<T>, data: Dataset<T>) -> Result<Self> {
        if data.input_dim() != mlp.spec().input_dim() || data.classes() != mlp.spec().classes() {
            return Err(Error::Argument(format!(
                "dataset ({} features, {} classes) does not match network widths {:?}",
                data.input_dim(),
                data.classes(),
                mlp.spec().widths
            )));
        }
        Ok(Self { mlp, data })
    }

    pub fn per_sample_losses(&self, params: &[T]) -> Result<Vec<T>> {
        (0..self.data.len()).map(|k| self.mlp.sample_loss(params, self.data.input(k), self.data.label(k))).collect()
    }

    pub fn per_sample_gradients(&self, params: &[T]) -> Result<Vec<Vec<T>>> {
        use rayon::prelude::*;
        (0..self.data.len())
            .into_par_iter()
            .map(|k| self.mlp.sample_gradient(params, self.data.input(k), self.data.label(k)))
            .collect()
    }
}

impl<T: Scalar> Objective<T> for MlpObjective<T> {
    fn dim(&self) -> usize {
        self.mlp.param_count()
    }

    fn loss(&self, theta: &[T]) -> Result<T> {
        Ok(crate::stats::mean(&self.per_sample_losses(theta)?))
    }

    fn gradient(&self, theta: &[T]) -> Result<Vec<T>> {
        super::minibatch_gradient(self, theta, &(0..self.data.len()).collect::<Vec<_>>())
    }
}
