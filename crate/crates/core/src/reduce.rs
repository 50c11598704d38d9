//! Per-layer dimensionality reduction.
//!
//! A reducer is a one-hidden-layer classifier trained to predict the traced
//! model's own labels from a layer's activations. Its hidden post-activation
//! (ReLU) is the embedding used for cache lookups; the softmax head only
//! exists to train it and is kept for provenance.

use std::borrow::Cow;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Dense, Mlp, SgdConfig, TrainReport};
use crate::trace::{ActivationTrace, Split};

const MAGIC: &[u8; 4] = b"FZRD";

#[derive(Debug, Clone, PartialEq)]
pub enum ReducerKind {
    /// `[hidden: input -> embed (ReLU), head: embed -> classes]`.
    Learned(Mlp<f32>),
    /// Lookups happen on raw activations.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reducer {
    pub layer_index: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub kind: ReducerKind,
}

#[derive(Debug, Clone, Copy)]
pub struct ReducerConfig {
    pub embed_dim: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
}

impl Default for ReducerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            epochs: 10,
            learning_rate: 0.01,
            batch_size: 32,
        }
    }
}

impl Reducer {
    pub fn identity(layer_index: usize, dim: usize) -> Self {
        Self {
            layer_index,
            input_dim: dim,
            embed_dim: dim,
            kind: ReducerKind::Identity,
        }
    }

    fn hidden(&self) -> Option<&Dense<f32>> {
        match &self.kind {
            ReducerKind::Learned(net) => net.layers.first(),
            ReducerKind::Identity => None,
        }
    }

    /// Embeds a single activation row.
    pub fn embed<'a>(&self, x: &'a [f32]) -> Result<Cow<'a, [f32]>> {
        if x.len() != self.input_dim {
            return Err(Error::arg(format!(
                "layer {} reducer expects dim {}, got {}",
                self.layer_index,
                self.input_dim,
                x.len()
            )));
        }
        Ok(match self.hidden() {
            Some(h) => Cow::Owned(h.forward(x, true)),
            None => Cow::Borrowed(x),
        })
    }

    /// Embeds every row; rows are independent so the result does not depend
    /// on how the input is batched.
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.input_dim {
            return Err(Error::arg(format!(
                "layer {} reducer expects {} columns, got {}",
                self.layer_index,
                self.input_dim,
                m.cols()
            )));
        }
        let Some(h) = self.hidden() else {
            return Ok(m.clone());
        };
        let rows: Vec<Vec<f32>> = (0..m.rows())
            .into_par_iter()
            .map(|i| h.forward(m.row(i), true))
            .collect();
        let mut out = Matrix::zeros(m.rows(), self.embed_dim);
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(r);
        }
        Ok(out)
    }

    /// Layout: magic, version, `u64` input/embed/classes, then f32 blocks
    /// hidden weights (embed x input), hidden bias, head weights
    /// (classes x embed), head bias. Identity reducers store `classes = 0`
    /// and no parameter blocks.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(MAGIC);
        w.u64(self.input_dim as u64);
        w.u64(self.embed_dim as u64);
        match &self.kind {
            ReducerKind::Identity => w.u64(0),
            ReducerKind::Learned(net) => {
                w.u64(net.output_dim() as u64);
                for l in &net.layers {
                    w.f32s(&l.weights);
                    w.f32s(&l.bias);
                }
            }
        }
        w.save(path)
    }

    pub fn load(path: &Path, layer_index: usize) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        let mut r = Reader::open(path, &bytes, MAGIC)?;
        let input_dim = r.len()?;
        let embed_dim = r.len()?;
        let classes = r.len()?;
        if input_dim == 0 || embed_dim == 0 {
            return Err(r.err("zero dimension"));
        }
        let kind = if classes == 0 {
            if embed_dim != input_dim {
                return Err(r.err("identity reducer must have embed dim == input dim"));
            }
            ReducerKind::Identity
        } else {
            if embed_dim > input_dim {
                return Err(r.err(format!(
                    "embed dim {embed_dim} exceeds input dim {input_dim}"
                )));
            }
            let mut layers = Vec::with_capacity(2);
            for (inputs, outputs) in [(input_dim, embed_dim), (embed_dim, classes)] {
                let n = inputs
                    .checked_mul(outputs)
                    .ok_or_else(|| r.err("shape overflow"))?;
                let weights = r.f32s(n)?;
                let bias = r.f32s(outputs)?;
                layers.push(Dense {
                    inputs,
                    outputs,
                    weights,
                    bias,
                });
            }
            ReducerKind::Learned(Mlp { layers })
        };
        r.finish()?;
        Ok(Self {
            layer_index,
            input_dim,
            embed_dim,
            kind,
        })
    }
}

/// Trains the reducer for `layer_index` on the trace's train split, using the
/// model-predicted labels as targets.
pub fn train_reducer(
    trace: &ActivationTrace,
    layer_index: usize,
    cfg: &ReducerConfig,
    seed: u64,
) -> Result<(Reducer, TrainReport)> {
    let meta = trace.layers.get(layer_index).ok_or_else(|| {
        Error::arg(format!(
            "layer {layer_index} does not exist (trace has {})",
            trace.num_layers()
        ))
    })?;
    if cfg.embed_dim == 0 {
        return Err(Error::arg("embed_dim must be at least 1"));
    }
    if cfg.embed_dim > meta.dim {
        return Err(Error::arg(format!(
            "embed_dim {} exceeds layer {layer_index} dim {}",
            cfg.embed_dim, meta.dim
        )));
    }
    let train = trace.split(Split::Train)?;
    if train.is_empty() {
        return Err(Error::arg("training split is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::he_init(&[meta.dim, cfg.embed_dim, trace.num_classes], &mut rng);
    let sgd = SgdConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
    };
    let report = net.train(
        &train.activations[layer_index],
        &train.model_labels,
        sgd,
        &mut rng,
    )?;
    Ok((
        Reducer {
            layer_index,
            input_dim: meta.dim,
            embed_dim: cfg.embed_dim,
            kind: ReducerKind::Learned(net),
        },
        report,
    ))
}

/// Maximum relative error between backprop gradients and central finite
/// differences of the summed batch loss, evaluated in `f64`.
///
/// Relative error per parameter is `|a - n| / max(|a|, |n|, 1e-6)`; the floor
/// keeps parameters with vanishing gradients from dividing noise by noise.
pub fn gradient_check(net: &Mlp<f32>, batch: &Matrix, labels: &[u32]) -> f64 {
    const STEP: f64 = 1e-5;
    let net = net.to_f64();
    let rows: Vec<Vec<f64>> = batch
        .iter_rows()
        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let (_, grads) = net.loss_and_grad(&refs, labels);

    let loss_at = |probe: &Mlp<f64>| probe.loss_and_grad(&refs, labels).0;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (l, g) in grads.iter().enumerate() {
        for (is_bias, analytic) in [(false, &g.weights), (true, &g.bias)] {
            for (i, &a) in analytic.iter().enumerate() {
                let orig = *param_mut(&mut probe, l, is_bias, i);
                *param_mut(&mut probe, l, is_bias, i) = orig + STEP;
                let up = loss_at(&probe);
                *param_mut(&mut probe, l, is_bias, i) = orig - STEP;
                let down = loss_at(&probe);
                *param_mut(&mut probe, l, is_bias, i) = orig;
                let numeric = (up - down) / (2.0 * STEP);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

fn param_mut(net: &mut Mlp<f64>, layer: usize, is_bias: bool, i: usize) -> &mut f64 {
    let layer = &mut net.layers[layer];
    if is_bias {
        &mut layer.bias[i]
    } else {
        &mut layer.weights[i]
    }
}
