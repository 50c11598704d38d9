//! Activation traces: per-split, per-layer activation matrices plus the
//! labels the traced model predicted for each example.

mod io;
mod model;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use io::{read_activations, read_trace, write_activations, write_trace, MANIFEST_FILE};
pub use model::{forward_collect, train_reference_model, RefModel};
pub use synth::{generate_synthetic, LabeledData, RawDataset, SplitCounts, SynthConfig};

/// Flattening convention recorded in manifests: channel, then height, then width.
pub const CHANNEL_MAJOR: &str = "CHW";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::arg(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub index: usize,
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    /// One matrix per trace layer, one row per example.
    pub activations: Vec<Matrix>,
    pub model_labels: Vec<u32>,
    pub true_labels: Option<Vec<u32>>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.model_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model_labels.is_empty()
    }

    /// Activation row of `example` at `layer`.
    pub fn activation(&self, layer: usize, example: usize) -> &[f32] {
        self.activations[layer].row(example)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub dataset_name: String,
    pub num_classes: usize,
    pub layers: Vec<LayerMeta>,
    pub splits: BTreeMap<Split, SplitData>,
    pub flatten_order: String,
}

impl ActivationTrace {
    /// Assembles a trace and checks every structural invariant.
    pub fn new(
        dataset_name: impl Into<String>,
        num_classes: usize,
        layers: Vec<LayerMeta>,
        splits: BTreeMap<Split, SplitData>,
    ) -> Result<Self> {
        let trace = Self {
            dataset_name: dataset_name.into(),
            num_classes,
            layers,
            splits,
            flatten_order: CHANNEL_MAJOR.to_string(),
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn split(&self, split: Split) -> Result<&SplitData> {
        self.splits
            .get(&split)
            .ok_or_else(|| Error::Config(format!("trace has no {split} split")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::arg("num_classes must be positive"));
        }
        for (i, meta) in self.layers.iter().enumerate() {
            if meta.index != i {
                return Err(Error::arg(format!(
                    "layer indices must be contiguous from 0: position {i} has index {}",
                    meta.index
                )));
            }
            if meta.dim == 0 {
                return Err(Error::arg(format!("layer {i} has zero dim")));
            }
        }
        for (split, data) in &self.splits {
            if data.activations.len() != self.layers.len() {
                return Err(Error::arg(format!(
                    "{split}: {} activation matrices for {} layers",
                    data.activations.len(),
                    self.layers.len()
                )));
            }
            let n = data.model_labels.len();
            for (meta, m) in self.layers.iter().zip(&data.activations) {
                if m.rows() != n || m.cols() != meta.dim {
                    return Err(Error::arg(format!(
                        "{split} layer {}: matrix is {}x{}, expected {n}x{}",
                        meta.index,
                        m.rows(),
                        m.cols(),
                        meta.dim
                    )));
                }
            }
            let label_sets = std::iter::once(&data.model_labels).chain(data.true_labels.as_ref());
            for labels in label_sets {
                if labels.len() != n {
                    return Err(Error::arg(format!(
                        "{split}: label vectors disagree on example count"
                    )));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.num_classes) {
                    return Err(Error::arg(format!(
                        "{split}: label {bad} outside [0, {})",
                        self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }
}
