//! A small multilayer-perceptron classifier with hand-written backpropagation.
//!
//! Parameters live in one flat [`ParamVector`]: for each layer, the weight
//! matrix (row-major, `out x in`) followed by the bias vector. Hidden layers
//! use the configured activation; the output layer feeds a softmax.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// Probabilities are clamped here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// Input dimension, hidden widths, class count.
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    biases: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config(
                "model.layer_sizes",
                "need at least an input and an output size",
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("model.layer_sizes", "all sizes must be >= 1"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: offset,
                    biases: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                shape
            })
            .collect()
    }
}

/// Flat model parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    fn check_len(&self, other: &ParamVector) -> Result<()> {
        if self.len() == other.len() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: other.len(),
            })
        }
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other)?;
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        self.check_len(other)?;
        self.0
            .iter_mut()
            .zip(&other.0)
            .for_each(|(a, b)| *a += alpha * b);
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|x| alpha * x).collect())
    }

    pub fn distance_squared(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "TrainSpec::default_epochs")]
    pub epochs: usize,
    #[serde(default = "TrainSpec::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "TrainSpec::default_learning_rate")]
    pub learning_rate: f64,
    /// FedProx proximal coefficient; 0 trains with plain SGD.
    #[serde(default)]
    pub prox_mu: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainSpec {
    fn default_epochs() -> usize {
        10
    }
    fn default_batch_size() -> usize {
        32
    }
    fn default_learning_rate() -> f64 {
        0.005
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(
                "train.learning_rate",
                "must be finite and >= 0",
            ));
        }
        if !(self.prox_mu.is_finite() && self.prox_mu >= 0.0) {
            return Err(Error::config("train.prox_mu", "must be finite and >= 0"));
        }
        Ok(())
    }
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: Self::default_epochs(),
            batch_size: Self::default_batch_size(),
            learning_rate: Self::default_learning_rate(),
            prox_mu: 0.0,
            seed: 0,
        }
    }
}

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights
/// and biases alike.
pub fn init_params(spec: &MlpSpec) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = seed::derived_rng(spec.seed, &[0x1417]);
    let mut values = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let bound = 1.0 / (layer.fan_in as f64).sqrt();
        let end = layer.biases + layer.fan_out;
        for v in &mut values[layer.weights..end] {
            *v = rng.random_range(-bound..=bound);
        }
    }
    Ok(ParamVector(values))
}

/// Per-sample activations reused across a batch.
struct Trace {
    /// `pre[l]` and `post[l]` for hidden layers; the last entry of `post` is
    /// the softmax output.
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Trace {
    fn new(spec: &MlpSpec) -> Self {
        let widths = &spec.layer_sizes[1..];
        Trace {
            pre: widths.iter().map(|&w| vec![0.0; w]).collect(),
            post: widths.iter().map(|&w| vec![0.0; w]).collect(),
            deltas: widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }
}

/// Runs the network on `x`, leaving logits in `trace.pre.last()` and
/// probabilities in `trace.post.last()`. Returns log-sum-exp of the logits.
fn forward_into(
    params: &[f64],
    spec: &MlpSpec,
    layers: &[LayerShape],
    x: &[f64],
    trace: &mut Trace,
) -> f64 {
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let (done, rest) = trace.post.split_at_mut(l);
        let input: &[f64] = if l == 0 { x } else { &done[l - 1] };
        let w = &params[layer.weights..layer.biases];
        let b = &params[layer.biases..layer.biases + layer.fan_out];
        let pre = &mut trace.pre[l];
        for o in 0..layer.fan_out {
            let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
            pre[o] = b[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
        let post = &mut rest[0];
        if l < last {
            for (a, &z) in post.iter_mut().zip(pre.iter()) {
                *a = spec.activation.apply(z);
            }
        }
    }
    let logits = &trace.pre[last];
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    for (p, &z) in trace.post[last].iter_mut().zip(logits.iter()) {
        *p = (z - lse).exp();
    }
    lse
}

fn check_input(params: &ParamVector, spec: &MlpSpec, dim: usize) -> Result<()> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            expected: spec.param_count(),
            actual: params.len(),
        });
    }
    if dim != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            actual: dim,
        });
    }
    Ok(())
}

/// Class probabilities for one feature vector.
pub fn forward(params: &ParamVector, spec: &MlpSpec, x: &[f64]) -> Result<Vec<f64>> {
    check_input(params, spec, x.len())?;
    let layers = spec.layers();
    let mut trace = Trace::new(spec);
    forward_into(params.as_slice(), spec, &layers, x, &mut trace);
    Ok(trace.post.pop().expect("at least one layer"))
}

/// Cross-entropy of one sample from the log-sum-exp and its true logit,
/// with the probability floored at [`PROB_FLOOR`].
fn sample_loss(lse: f64, true_logit: f64) -> f64 {
    (lse - true_logit).min(-PROB_FLOOR.ln())
}

/// Mean cross-entropy over `batch` plus `(prox_mu / 2) * ||params - anchor||^2`,
/// with its analytic gradient.
///
/// The gradient is that of the unfloored cross-entropy, so it stays informative
/// for samples whose true-class probability is below [`PROB_FLOOR`].
pub fn loss_and_grad(
    params: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    batch: &[usize],
    anchor: &ParamVector,
    prox_mu: f64,
) -> Result<(f64, ParamVector)> {
    check_input(params, spec, data.dim())?;
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let k = spec.class_count();
    if let Some(&label) = batch.iter().map(|&i| &data.labels()[i]).find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let mut grad = vec![0.0; params.len()];
    let loss = accumulate(params.as_slice(), spec, data, batch, &mut grad);
    let mut total = loss;
    if prox_mu > 0.0 {
        params.check_len(anchor)?;
        let mut sq = 0.0;
        for ((g, p), a) in grad
            .iter_mut()
            .zip(params.as_slice())
            .zip(anchor.as_slice())
        {
            let diff = p - a;
            sq += diff * diff;
            *g += prox_mu * diff;
        }
        total += 0.5 * prox_mu * sq;
    }
    Ok((total, ParamVector(grad)))
}

/// Adds the mean cross-entropy gradient of `batch` into `grad` and returns
/// the mean loss.
fn accumulate(
    params: &[f64],
    spec: &MlpSpec,
    data: &Dataset,
    batch: &[usize],
    grad: &mut [f64],
) -> f64 {
    let layers = spec.layers();
    let mut trace = Trace::new(spec);
    let scale = 1.0 / batch.len() as f64;
    let last = layers.len() - 1;
    let mut loss = 0.0;
    for &i in batch {
        let x = data.row(i);
        let y = data.labels()[i];
        let lse = forward_into(params, spec, &layers, x, &mut trace);
        loss += sample_loss(lse, trace.pre[last][y]);

        for (o, d) in trace.deltas[last].iter_mut().enumerate() {
            let target = if o == y { 1.0 } else { 0.0 };
            *d = (trace.post[last][o] - target) * scale;
        }
        for l in (0..layers.len()).rev() {
            let layer = layers[l];
            let input: &[f64] = if l == 0 { x } else { &trace.post[l - 1] };
            let delta = &trace.deltas[l];
            for o in 0..layer.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[layer.weights + o * layer.fan_in..][..layer.fan_in];
                row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
                grad[layer.biases + o] += d;
            }
            if l > 0 {
                let w = &params[layer.weights..layer.biases];
                let (below, above) = trace.deltas.split_at_mut(l);
                let prev = &mut below[l - 1];
                let delta = &above[0];
                for (j, p) in prev.iter_mut().enumerate() {
                    let back: f64 = (0..layer.fan_out)
                        .map(|o| w[o * layer.fan_in + j] * delta[o])
                        .sum();
                    *p = back
                        * spec
                            .activation
                            .derivative(trace.pre[l - 1][j], trace.post[l - 1][j]);
                }
            }
        }
    }
    loss * scale
}

/// Direction of the local optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Direction {
    Descent,
    Ascent,
}

/// Mini-batch SGD from `global` for `train.epochs` epochs.
pub fn local_train(
    global: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    train: &TrainSpec,
) -> Result<ParamVector> {
    run_sgd(global, spec, data, train, Direction::Descent, train.prox_mu)
}

pub(crate) fn run_sgd(
    global: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    train: &TrainSpec,
    direction: Direction,
    prox_mu: f64,
) -> Result<ParamVector> {
    check_input(global, spec, data.dim())?;
    train.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("client dataset"));
    }
    let mut params = global.clone();
    if train.epochs == 0 || train.learning_rate == 0.0 {
        return Ok(params);
    }
    let step = match direction {
        Direction::Descent => -train.learning_rate,
        Direction::Ascent => train.learning_rate,
    };
    let mut rng = seed::rng(train.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(train.batch_size) {
            let (_, grad) = loss_and_grad(&params, spec, data, batch, global, prox_mu)?;
            let previous = (direction == Direction::Ascent).then(|| params.clone());
            params.add_scaled(step, &grad)?;
            if !params.is_finite() {
                match previous {
                    Some(p) => {
                        log::warn!(
                            "gradient ascent diverged in epoch {epoch}; keeping last finite step"
                        );
                        return Ok(p);
                    }
                    None => {
                        return Err(Error::config(
                            "train.learning_rate",
                            format!("training diverged to non-finite parameters in epoch {epoch}"),
                        ))
                    }
                }
            }
        }
    }
    Ok(params)
}

/// Per-sample losses and argmax predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub losses: Vec<f64>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// Per-sample cross-entropy (no proximal term) and predicted labels.
pub fn eval_losses(params: &ParamVector, spec: &MlpSpec, data: &Dataset) -> Result<Evaluation> {
    check_input(params, spec, data.dim())?;
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let k = spec.class_count();
    let layers = spec.layers();
    let mut trace = Trace::new(spec);
    let last = layers.len() - 1;
    let mut losses = Vec::with_capacity(data.len());
    let mut predictions = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let y = data.labels()[i];
        if y >= k {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: k,
            });
        }
        let lse = forward_into(params.as_slice(), spec, &layers, data.row(i), &mut trace);
        losses.push(sample_loss(lse, trace.pre[last][y]));
        let logits = &trace.pre[last];
        let best = (0..k).fold(0, |best, c| if logits[c] > logits[best] { c } else { best });
        predictions.push(best);
    }
    Ok(Evaluation {
        losses,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(sizes: &[usize], seed: u64) -> MlpSpec {
        MlpSpec {
            layer_sizes: sizes.to_vec(),
            activation: Activation::Tanh,
            seed,
        }
    }

    fn tiny_data(n: usize, d: usize, k: usize, seed: u64) -> Dataset {
        gen_synthetic(&SyntheticSpec {
            classes: k,
            features: d,
            samples: n,
            separation: 2.0,
            seed,
            groups: 0,
        })
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_expected_length() {
        let s = spec(&[2, 3, 2], 7);
        let a = init_params(&s).unwrap();
        assert_eq!(a, init_params(&s).unwrap());
        assert_eq!(a.len(), 17);
        assert_ne!(a, init_params(&spec(&[2, 3, 2], 8)).unwrap());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let s = spec(&[4, 8, 8, 3], 1);
        let p = init_params(&s).unwrap();
        for layer in s.layers() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            let end = layer.biases + layer.fan_out;
            assert!(p.as_slice()[layer.weights..end]
                .iter()
                .all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(init_params(&spec(&[3], 0)).is_err());
        assert!(init_params(&spec(&[3, 0, 2], 0)).is_err());
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let s = spec(&[3, 4, 5], 0);
        let p = ParamVector::zeros(s.param_count());
        let out = forward(&p, &s, &[1.0, -2.0, 0.5]).unwrap();
        assert!(out.iter().all(|&q| (q - 0.2).abs() < 1e-15));
    }

    #[test]
    fn large_logits_stay_finite() {
        let s = spec(&[1, 3], 0);
        // Single linear layer: logits = w * x + b.
        let p = ParamVector::new(vec![1e3, -1e3, 0.0, 0.0, 0.0, 0.0]);
        for x in [1.0, -1.0] {
            let out = forward(&p, &s, &[x]).unwrap();
            assert!(out.iter().all(|q| q.is_finite() && *q >= 0.0));
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let data = Dataset::new(vec![1.0], 1, vec![1], None, 3).unwrap();
        let ev = eval_losses(&p, &s, &data).unwrap();
        assert!((ev.losses[0] - (-PROB_FLOOR.ln())).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let s = spec(&[3, 2], 0);
        let p = init_params(&s).unwrap();
        assert!(matches!(
            forward(&p, &s, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn uniform_prediction_loss_is_ln_k() {
        let s = spec(&[2, 10], 0);
        let p = ParamVector::zeros(s.param_count());
        let data = tiny_data(20, 2, 10, 1);
        let batch: Vec<usize> = (0..20).collect();
        let (loss, _) = loss_and_grad(&p, &s, &data, &batch, &p, 0.0).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        let ev = eval_losses(
            &ParamVector::zeros(spec(&[2, 4], 0).param_count()),
            &spec(&[2, 4], 0),
            &tiny_data(8, 2, 4, 1),
        )
        .unwrap();
        assert!(ev.losses.iter().all(|l| (l - 4f64.ln()).abs() < 1e-12));
        assert_eq!(ev.losses.len(), 8);
        assert_eq!(ev.predictions.len(), 8);
    }

    #[test]
    fn prox_term_vanishes_at_anchor() {
        let s = spec(&[3, 4, 3], 2);
        let p = init_params(&s).unwrap();
        let data = tiny_data(16, 3, 3, 2);
        let batch: Vec<usize> = (0..8).collect();
        let plain = loss_and_grad(&p, &s, &data, &batch, &p, 0.0).unwrap();
        let prox = loss_and_grad(&p, &s, &data, &batch, &p, 5.0).unwrap();
        assert_eq!(plain, prox);
    }

    #[test]
    fn empty_batch_and_bad_label_are_errors() {
        let s = spec(&[3, 2], 2);
        let p = init_params(&s).unwrap();
        let data = tiny_data(6, 3, 3, 2);
        assert!(matches!(
            loss_and_grad(&p, &s, &data, &[], &p, 0.0),
            Err(Error::Empty(_))
        ));
        // Three-class data against a two-class model.
        let bad: Vec<usize> = (0..6).collect();
        assert!(matches!(
            loss_and_grad(&p, &s, &data, &bad, &p, 0.0),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn eval_mean_matches_batch_loss() {
        let s = spec(&[4, 6, 3], 3);
        let p = init_params(&s).unwrap();
        let data = tiny_data(30, 4, 3, 5);
        let all: Vec<usize> = (0..30).collect();
        let (loss, _) = loss_and_grad(&p, &s, &data, &all, &p, 0.0).unwrap();
        let ev = eval_losses(&p, &s, &data).unwrap();
        assert!((ev.mean_loss() - loss).abs() < 1e-9);
    }

    #[test]
    fn zero_epochs_or_rate_return_global() {
        let s = spec(&[3, 4, 3], 1);
        let g = init_params(&s).unwrap();
        let data = tiny_data(20, 3, 3, 1);
        let mut train = TrainSpec {
            epochs: 0,
            ..TrainSpec::default()
        };
        assert_eq!(local_train(&g, &s, &data, &train).unwrap(), g);
        train.epochs = 3;
        train.learning_rate = 0.0;
        assert_eq!(local_train(&g, &s, &data, &train).unwrap(), g);
    }

    #[test]
    fn local_train_is_deterministic() {
        let s = spec(&[3, 4, 3], 1);
        let g = init_params(&s).unwrap();
        let data = tiny_data(50, 3, 3, 1);
        let train = TrainSpec {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.1,
            prox_mu: 0.0,
            seed: 42,
        };
        let a = local_train(&g, &s, &data, &train).unwrap();
        assert_eq!(a, local_train(&g, &s, &data, &train).unwrap());
        assert_ne!(a, g);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = gen_synthetic(&SyntheticSpec {
            classes: 2,
            features: 2,
            samples: 400,
            separation: 6.0,
            seed: 3,
            groups: 0,
        })
        .unwrap();
        let s = MlpSpec {
            layer_sizes: vec![2, 8, 2],
            activation: Activation::Relu,
            seed: 0,
        };
        let g = init_params(&s).unwrap();
        let train = TrainSpec {
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.05,
            prox_mu: 0.0,
            seed: 1,
        };
        let trained = local_train(&g, &s, &data, &train).unwrap();
        let ev = eval_losses(&trained, &s, &data).unwrap();
        let correct = ev
            .predictions
            .iter()
            .zip(data.labels())
            .filter(|(p, l)| p == l)
            .count();
        assert!(
            correct as f64 / 400.0 >= 0.95,
            "accuracy {}",
            correct as f64 / 400.0
        );
    }

    #[test]
    fn strong_prox_term_pulls_toward_global() {
        let s = spec(&[3, 5, 3], 4);
        let g = init_params(&s).unwrap();
        let data = tiny_data(64, 3, 3, 7);
        let mut train = TrainSpec {
            epochs: 1,
            batch_size: 8,
            learning_rate: 1e-7,
            prox_mu: 0.0,
            seed: 9,
        };
        let free = local_train(&g, &s, &data, &train).unwrap();
        train.prox_mu = 1e6;
        let pulled = local_train(&g, &s, &data, &train).unwrap();
        let d_free = free.sub(&g).unwrap().norm();
        let d_pulled = pulled.sub(&g).unwrap().norm();
        assert!(d_pulled < d_free, "{d_pulled} vs {d_free}");
    }

    #[test]
    fn empty_client_is_signalled() {
        let s = spec(&[1, 2], 0);
        let g = init_params(&s).unwrap();
        let data = Dataset::new(vec![0.0], 1, vec![0], None, 2).unwrap();
        let empty = data.subset(&[]);
        assert!(empty.is_err());
        assert!(local_train(&g, &s, &data, &TrainSpec::default()).is_ok());
    }

    fn numeric_grad(
        params: &ParamVector,
        spec: &MlpSpec,
        data: &Dataset,
        batch: &[usize],
        anchor: &ParamVector,
        mu: f64,
    ) -> Vec<f64> {
        let h = 1e-6;
        (0..params.len())
            .map(|i| {
                let mut p = params.clone();
                p.as_mut_slice()[i] += h;
                let up = loss_and_grad(&p, spec, data, batch, anchor, mu).unwrap().0;
                p.as_mut_slice()[i] -= 2.0 * h;
                let down = loss_and_grad(&p, spec, data, batch, anchor, mu).unwrap().0;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seed::rng(2024);
        for draw in 0..20u64 {
            let d = rng.random_range(1..5);
            let k = rng.random_range(2..5);
            let mut sizes = vec![d];
            for _ in 0..rng.random_range(0..3) {
                sizes.push(rng.random_range(1..6));
            }
            sizes.push(k);
            let activation = if draw % 2 == 0 {
                Activation::Tanh
            } else {
                Activation::Relu
            };
            let s = MlpSpec {
                layer_sizes: sizes,
                activation,
                seed: draw,
            };
            let data = tiny_data(12, d, k, draw);
            let params = init_params(&s).unwrap().scaled(2.0);
            let anchor = init_params(&MlpSpec {
                seed: draw + 100,
                ..s.clone()
            })
            .unwrap();
            let mu = if draw % 3 == 0 { 0.7 } else { 0.0 };
            let batch: Vec<usize> = (0..data.len())
                .filter(|i| i % 2 == draw as usize % 2)
                .collect();
            let (_, analytic) = loss_and_grad(&params, &s, &data, &batch, &anchor, mu).unwrap();
            let numeric = numeric_grad(&params, &s, &data, &batch, &anchor, mu);
            let diff: f64 = analytic
                .as_slice()
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = analytic
                .norm()
                .max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt())
                .max(1e-8);
            assert!(
                diff / scale <= 1e-4,
                "draw {draw}: relative error {}",
                diff / scale
            );
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(
            scale in 0.0f64..1e4,
            x in prop::collection::vec(-10.0f64..10.0, 3),
            seed in 0u64..1000,
        ) {
            let s = spec(&[3, 4, 5], seed);
            let p = init_params(&s).unwrap().scaled(scale);
            let probs = forward(&p, &s, &x).unwrap();
            prop_assert!(probs.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
