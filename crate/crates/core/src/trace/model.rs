use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ActivationTrace, LayerMeta, RawDataset, SplitData};
use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{argmax, Dense, Mlp, SgdConfig, TrainReport};

const MAGIC: &[u8; 4] = b"FZMD";

/// Small ReLU feedforward classifier standing in for a real network.
///
/// Every hidden layer's post-activation is one trace layer; the final layer
/// produces logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RefModel {
    pub net: Mlp<f32>,
    pub seed: u64,
}

impl RefModel {
    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn hidden_layers(&self) -> usize {
        self.net.layers.len() - 1
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.net.layers[..self.hidden_layers()]
            .iter()
            .map(|l| l.outputs)
            .collect()
    }

    /// Computes hidden layer `layer` from the previous layer's output (or the
    /// input, for layer 0).
    pub fn forward_hidden(&self, layer: usize, prev: &[f32]) -> Vec<f32> {
        self.net.forward_layer(layer, prev)
    }

    /// Output-layer prediction given the last hidden activation.
    pub fn predict_from_last_hidden(&self, last_hidden: &[f32]) -> u32 {
        let out = self.net.forward_layer(self.hidden_layers(), last_hidden);
        argmax(&out) as u32
    }

    pub fn predict(&self, x: &[f32]) -> u32 {
        argmax(&self.net.logits(x)) as u32
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(MAGIC);
        w.u64(self.net.layers.len() as u64);
        w.u64(self.seed);
        for l in &self.net.layers {
            w.u64(l.inputs as u64);
            w.u64(l.outputs as u64);
            w.f32s(&l.weights);
            w.f32s(&l.bias);
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        let mut r = Reader::open(path, &bytes, MAGIC)?;
        let n = r.len()?;
        let seed = r.u64()?;
        let mut layers: Vec<Dense<f32>> = Vec::with_capacity(n.min(1024));
        for i in 0..n {
            let inputs = r.len()?;
            let outputs = r.len()?;
            if let Some(prev) = layers.last() {
                if prev.outputs != inputs {
                    return Err(r.err(format!(
                        "layer {i} expects {inputs} inputs but previous layer has {} outputs",
                        prev.outputs
                    )));
                }
            }
            let count = inputs
                .checked_mul(outputs)
                .ok_or_else(|| r.err("layer shape overflow"))?;
            let weights = r.f32s(count)?;
            let bias = r.f32s(outputs)?;
            layers.push(Dense {
                inputs,
                outputs,
                weights,
                bias,
            });
        }
        r.finish()?;
        if layers.len() < 2 {
            return Err(Error::format(path, "model needs at least two layers"));
        }
        Ok(Self {
            net: Mlp { layers },
            seed,
        })
    }
}

/// Trains a ReLU classifier with the given hidden widths on the train split.
///
/// Depth is `hidden_widths.len() + 1`; at least one hidden layer is required.
pub fn train_reference_model(
    data: &RawDataset,
    hidden_widths: &[usize],
    sgd: SgdConfig,
    seed: u64,
) -> Result<(RefModel, TrainReport)> {
    if hidden_widths.is_empty() {
        return Err(Error::arg(
            "reference model needs at least one hidden layer",
        ));
    }
    if hidden_widths.contains(&0) {
        return Err(Error::arg("hidden widths must be positive"));
    }
    let mut dims = Vec::with_capacity(hidden_widths.len() + 2);
    dims.push(data.input_dim);
    dims.extend_from_slice(hidden_widths);
    dims.push(data.num_classes);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::he_init(&dims, &mut rng);
    let train = data.split(super::Split::Train)?;
    let report = net.train(&train.inputs, &train.labels, sgd, &mut rng)?;
    Ok((RefModel { net, seed }, report))
}

/// Runs every example through `model`, recording each hidden post-activation
/// as a trace layer and the output argmax as the model label.
pub fn forward_collect(model: &RefModel, data: &RawDataset) -> Result<ActivationTrace> {
    if data.input_dim != model.input_dim() {
        return Err(Error::arg(format!(
            "dataset input dim {} does not match model input dim {}",
            data.input_dim,
            model.input_dim()
        )));
    }
    if data.num_classes != model.num_classes() {
        return Err(Error::arg(format!(
            "dataset has {} classes, model outputs {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    let hidden = model.hidden_layers();
    let widths = model.hidden_widths();
    let layers: Vec<LayerMeta> = widths
        .iter()
        .enumerate()
        .map(|(index, &dim)| LayerMeta {
            index,
            name: format!("hidden{index}"),
            dim,
        })
        .collect();

    let mut splits = BTreeMap::new();
    for (&split, labeled) in &data.splits {
        let n = labeled.inputs.rows();
        let per_row: Vec<Vec<Vec<f32>>> = (0..n)
            .into_par_iter()
            .map(|i| model.net.forward_all(labeled.inputs.row(i)))
            .collect();
        let mut activations: Vec<Matrix> = widths.iter().map(|&w| Matrix::zeros(n, w)).collect();
        let mut model_labels = Vec::with_capacity(n);
        for (i, outs) in per_row.iter().enumerate() {
            for (l, m) in activations.iter_mut().enumerate() {
                m.row_mut(i).copy_from_slice(&outs[l]);
            }
            model_labels.push(argmax(&outs[hidden]) as u32);
        }
        splits.insert(
            split,
            SplitData {
                activations,
                model_labels,
                true_labels: Some(labeled.labels.clone()),
            },
        );
    }
    ActivationTrace::new(data.name.clone(), data.num_classes, layers, splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{generate_synthetic, Split, SplitCounts, SynthConfig};

    fn blobs(classes: usize, dim: usize, sep: f64) -> RawDataset {
        generate_synthetic(&SynthConfig {
            num_classes: classes,
            input_dim: dim,
            counts: SplitCounts {
                train: 300,
                val: 60,
                test: 60,
            },
            separation: sep,
            seed: 5,
        })
        .unwrap()
    }

    fn sgd(epochs: usize) -> SgdConfig {
        SgdConfig {
            epochs,
            learning_rate: 0.01,
            batch_size: 32,
        }
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let data = blobs(2, 4, 100.0);
        let (_, report) = train_reference_model(&data, &[16, 16, 8], sgd(10), 1).unwrap();
        assert!(report.train_accuracy >= 0.99, "{report:?}");
    }

    #[test]
    fn zero_epochs_returns_seeded_init() {
        let data = blobs(3, 4, 5.0);
        let (a, _) = train_reference_model(&data, &[8], sgd(0), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init = Mlp::he_init(&[4, 8, 3], &mut rng);
        assert_eq!(a.net, init);
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(3, 4, 5.0);
        let (a, _) = train_reference_model(&data, &[8, 4], sgd(3), 2).unwrap();
        let (b, _) = train_reference_model(&data, &[8, 4], sgd(3), 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn requires_a_hidden_layer() {
        let data = blobs(2, 2, 5.0);
        assert!(train_reference_model(&data, &[], sgd(1), 0).is_err());
    }

    #[test]
    fn trace_shape_follows_hidden_widths() {
        let data = blobs(3, 5, 5.0);
        let (model, _) = train_reference_model(&data, &[8, 4], sgd(1), 0).unwrap();
        let trace = forward_collect(&model, &data).unwrap();
        let dims: Vec<usize> = trace.layers.iter().map(|l| l.dim).collect();
        assert_eq!(dims, vec![8, 4]);
        assert_eq!(trace.split(Split::Val).unwrap().len(), 60);
    }

    #[test]
    fn model_label_matches_independent_forward() {
        let data = blobs(4, 6, 3.0);
        let (model, _) = train_reference_model(&data, &[10, 7], sgd(2), 4).unwrap();
        let trace = forward_collect(&model, &data).unwrap();
        let test = trace.split(Split::Test).unwrap();
        let inputs = &data.split(Split::Test).unwrap().inputs;
        for (i, x) in inputs.iter_rows().enumerate() {
            // Straight-line re-evaluation in f64.
            let mut h: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
            let last = model.net.layers.len() - 1;
            for (li, layer) in model.net.layers.iter().enumerate() {
                let mut next = vec![0.0f64; layer.outputs];
                for (o, out) in next.iter_mut().enumerate() {
                    let mut z = f64::from(layer.bias[o]);
                    for (j, &hj) in h.iter().enumerate() {
                        z += f64::from(layer.weights[o * layer.inputs + j]) * hj;
                    }
                    *out = if li < last { z.max(0.0) } else { z };
                }
                h = next;
            }
            let expected = argmax(&h) as u32;
            assert_eq!(test.model_labels[i], expected, "example {i}");
        }
    }

    #[test]
    fn duplicate_inputs_give_identical_rows() {
        let mut data = blobs(3, 4, 5.0);
        let train = data.splits.get_mut(&Split::Train).unwrap();
        let first = train.inputs.row(0).to_vec();
        train.inputs.row_mut(1).copy_from_slice(&first);
        let (model, _) = train_reference_model(&data, &[6, 5], sgd(1), 3).unwrap();
        let trace = forward_collect(&model, &data).unwrap();
        let t = trace.split(Split::Train).unwrap();
        for m in &t.activations {
            assert_eq!(m.row(0), m.row(1));
        }
        assert_eq!(t.model_labels[0], t.model_labels[1]);
    }

    #[test]
    fn input_dim_mismatch_is_argument_error() {
        let data = blobs(2, 4, 5.0);
        let other = blobs(2, 3, 5.0);
        let (model, _) = train_reference_model(&data, &[4], sgd(0), 0).unwrap();
        assert!(matches!(
            forward_collect(&model, &other),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let data = blobs(2, 3, 5.0);
        let (model, _) = train_reference_model(&data, &[5, 4], sgd(1), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.fzm");
        model.save(&p).unwrap();
        assert_eq!(RefModel::load(&p).unwrap(), model);
    }
}
