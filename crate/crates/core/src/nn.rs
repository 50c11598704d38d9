//! Minimal fully connected network: ReLU on every hidden layer, linear output
//! layer, softmax cross-entropy loss, plain mini-batch SGD.
//!
//! The code is generic over the float type so the same forward/backward path
//! runs in `f32` for training and in `f64` for finite-difference checks.

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Float> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn forward(&self, x: &[T], relu: bool) -> Vec<T> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(w, &b)| {
                let z = w.iter().zip(x).fold(b, |acc, (&w, &x)| acc + w * x);
                if relu {
                    z.max(T::zero())
                } else {
                    z
                }
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn cast<U: Float>(&self) -> Dense<U> {
        let c = |v: &T| U::from(*v).expect("float cast");
        Dense {
            inputs: self.inputs,
            outputs: self.outputs,
            weights: self.weights.iter().map(c).collect(),
            bias: self.bias.iter().map(c).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

/// Hyperparameters for [`Mlp::train`].
#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainReport {
    /// Mean loss over the last epoch (NaN when no epoch ran).
    pub final_loss: f64,
    pub train_accuracy: f64,
}

impl Mlp<f32> {
    /// He-normal weights, zero biases. `dims` is `[input, hidden.., output]`.
    pub fn he_init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let std = (2.0 / inputs as f64).sqrt() as f32;
                let normal = Normal::new(0.0f32, std).expect("finite std");
                Dense {
                    inputs,
                    outputs,
                    weights: (0..inputs * outputs).map(|_| normal.sample(rng)).collect(),
                    bias: vec![0.0; outputs],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn to_f64(&self) -> Mlp<f64> {
        Mlp {
            layers: self.layers.iter().map(Dense::cast).collect(),
        }
    }

    /// Mini-batch SGD on softmax cross-entropy. Batches are reshuffled every
    /// epoch from `rng`; each step uses the batch-mean gradient.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        inputs: &Matrix,
        labels: &[u32],
        cfg: SgdConfig,
        rng: &mut R,
    ) -> Result<TrainReport> {
        if inputs.rows() != labels.len() {
            return Err(Error::arg(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if inputs.cols() != self.input_dim() {
            return Err(Error::arg(format!(
                "input dim {} does not match network input {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        if cfg.batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        let classes = self.output_dim();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::arg(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }

        let mut order: Vec<usize> = (0..inputs.rows()).collect();
        let mut final_loss = f64::NAN;
        for epoch in 1..=cfg.epochs {
            order.shuffle(rng);
            let mut epoch_loss = 0.0f64;
            for batch in order.chunks(cfg.batch_size) {
                let rows: Vec<&[f32]> = batch.iter().map(|&i| inputs.row(i)).collect();
                let ys: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();
                let (loss, grads) = self.loss_and_grad(&rows, &ys);
                let loss = f64::from(loss);
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                epoch_loss += loss;
                self.apply_gradient(&grads, cfg.learning_rate / batch.len() as f32);
                if !self.layers.iter().all(Dense::is_finite) {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                    });
                }
            }
            final_loss = epoch_loss / inputs.rows().max(1) as f64;
        }
        Ok(TrainReport {
            final_loss,
            train_accuracy: self.accuracy(inputs, labels),
        })
    }

    pub fn accuracy(&self, inputs: &Matrix, labels: &[u32]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let hits = inputs
            .iter_rows()
            .zip(labels)
            .filter(|(x, &y)| argmax(&self.logits(x)) == y as usize)
            .count();
        hits as f64 / labels.len() as f64
    }

    fn apply_gradient(&mut self, grads: &[Dense<f32>], step: f32) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= step * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= step * gb;
            }
        }
    }
}

impl<T: Float> Mlp<T> {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Applies layer `index`, with ReLU unless it is the output layer.
    pub fn forward_layer(&self, index: usize, x: &[T]) -> Vec<T> {
        self.layers[index].forward(x, index + 1 < self.layers.len())
    }

    /// Post-activation of every layer; the last entry holds the logits.
    pub fn forward_all(&self, x: &[T]) -> Vec<Vec<T>> {
        let mut outs: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let next = match outs.last() {
                Some(prev) => self.forward_layer(i, prev),
                None => self.forward_layer(i, x),
            };
            outs.push(next);
        }
        outs
    }

    pub fn logits(&self, x: &[T]) -> Vec<T> {
        self.forward_all(x).pop().unwrap_or_default()
    }

    /// Summed cross-entropy over the batch and its gradient (also summed, not
    /// averaged) with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[&[T]], labels: &[u32]) -> (T, Vec<Dense<T>>) {
        let mut grads: Vec<Dense<T>> = self
            .layers
            .iter()
            .map(|l| Dense::zeros(l.inputs, l.outputs))
            .collect();
        let mut total = T::zero();
        for (&x, &y) in batch.iter().zip(labels) {
            let acts = self.forward_all(x);
            let logits = acts.last().expect("network has layers");
            let (loss, mut delta) = softmax_xent(logits, y as usize);
            total = total + loss;
            for l in (0..self.layers.len()).rev() {
                let input: &[T] = if l == 0 { x } else { &acts[l - 1] };
                let g = &mut grads[l];
                for (o, &d) in delta.iter().enumerate() {
                    if d == T::zero() {
                        continue;
                    }
                    g.bias[o] = g.bias[o] + d;
                    let row = &mut g.weights[o * g.inputs..(o + 1) * g.inputs];
                    for (gw, &xi) in row.iter_mut().zip(input) {
                        *gw = *gw + d * xi;
                    }
                }
                if l == 0 {
                    break;
                }
                let layer = &self.layers[l];
                let mut back = vec![T::zero(); layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    if d == T::zero() {
                        continue;
                    }
                    let w = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (b, &wi) in back.iter_mut().zip(w) {
                        *b = *b + d * wi;
                    }
                }
                // ReLU derivative, taken as 0 at exactly 0.
                for (b, &a) in back.iter_mut().zip(&acts[l - 1]) {
                    if a <= T::zero() {
                        *b = T::zero();
                    }
                }
                delta = back;
            }
        }
        (total, grads)
    }
}

/// Numerically stable cross-entropy and its gradient w.r.t. the logits.
fn softmax_xent<T: Float>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    let loss = max + sum.ln() - logits[label];
    let mut grad: Vec<T> = exps.into_iter().map(|e| e / sum).collect();
    grad[label] = grad[label] - T::one();
    (loss, grad)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
