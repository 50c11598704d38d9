use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Split;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub counts: SplitCounts,
    /// Radius of the sphere the class means are placed on.
    pub separation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub inputs: Matrix,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub name: String,
    pub num_classes: usize,
    pub input_dim: usize,
    pub splits: BTreeMap<Split, LabeledData>,
    /// Class means, one row per class.
    pub class_means: Matrix,
}

impl RawDataset {
    pub fn split(&self, split: Split) -> Result<&LabeledData> {
        self.splits
            .get(&split)
            .ok_or_else(|| Error::Config(format!("dataset has no {split} split")))
    }
}

/// Gaussian blobs with unit-variance noise around class means on a sphere of
/// radius `separation`.
///
/// The first `min(num_classes, input_dim)` mean directions are orthogonalised
/// so low-dimensional configurations are not left to chance; any further
/// classes get independent random directions. Labels cycle through the
/// classes and are then shuffled.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<RawDataset> {
    if cfg.num_classes == 0 || cfg.input_dim == 0 {
        return Err(Error::arg("num_classes and input_dim must be positive"));
    }
    if !(cfg.separation > 0.0 && cfg.separation.is_finite()) {
        return Err(Error::arg(format!(
            "separation must be positive and finite, got {}",
            cfg.separation
        )));
    }
    for split in Split::ALL {
        if cfg.counts.get(split) == 0 {
            return Err(Error::arg(format!("{split} count must be at least 1")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = class_means(cfg, &mut rng);

    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let n = cfg.counts.get(split);
        let mut labels: Vec<u32> = (0..n).map(|i| (i % cfg.num_classes) as u32).collect();
        labels.shuffle(&mut rng);
        let mut inputs = Matrix::zeros(n, cfg.input_dim);
        for (i, &label) in labels.iter().enumerate() {
            let mean = &means[label as usize];
            for (x, &m) in inputs.row_mut(i).iter_mut().zip(mean) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *x = (m + noise) as f32;
            }
        }
        splits.insert(split, LabeledData { inputs, labels });
    }

    let mean_rows: Vec<Vec<f32>> = means
        .iter()
        .map(|m| m.iter().map(|&v| v as f32).collect())
        .collect();
    Ok(RawDataset {
        name: format!(
            "blobs-c{}-d{}-s{}",
            cfg.num_classes, cfg.input_dim, cfg.seed
        ),
        num_classes: cfg.num_classes,
        input_dim: cfg.input_dim,
        splits,
        class_means: Matrix::from_rows(&mean_rows)?,
    })
}

fn class_means(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
    while dirs.len() < cfg.num_classes {
        let mut v: Vec<f64> = (0..cfg.input_dim)
            .map(|_| StandardNormal.sample(&mut *rng))
            .collect();
        if dirs.len() < cfg.input_dim {
            for d in &dirs {
                let proj: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        dirs.push(v);
    }
    dirs.into_iter()
        .map(|d| d.into_iter().map(|a| a * cfg.separation).collect())
        .collect()
}
