//! Per-layer approximate caches and the lookup confidence rules.
//!
//! k-NN caches keep every reduced training embedding with its model label. A
//! lookup collects the `k` nearest entries and, for each label `i` with `m_i`
//! occurrences at distances `d_1..d_m`, scores
//!
//! ```text
//! C_i = (m_i / k) * sum_j 1 / max(d_j, eps)
//! ```
//!
//! Centroid caches keep one k-means center per cluster with its majority
//! label and majority fraction; the nearest center answers with
//! `fraction / max(d, eps)`.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::neighbors::{cluster_summary, kmeans_fit, knn_query, KMeansConfig, Neighbor};
use crate::reduce::Reducer;
use crate::trace::{ActivationTrace, Split};

/// Distances are clamped to this floor so exact hits give a finite confidence.
pub const DISTANCE_FLOOR: f64 = 1e-9;

const MAGIC: &[u8; 4] = b"FZCC";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    Knn,
    #[serde(alias = "centroid")]
    Kmeans,
}

impl CacheMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CacheMode::Knn => "knn",
            CacheMode::Kmeans => "kmeans",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CacheContents {
    Knn {
        points: Matrix,
        labels: Vec<u32>,
        k: usize,
    },
    Centroid {
        centroids: Matrix,
        labels: Vec<u32>,
        fractions: Vec<f32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub layer_index: usize,
    pub embed_dim: usize,
    pub contents: CacheContents,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookupResult {
    pub label: u32,
    pub confidence: f64,
    /// Confidence of every label that appeared in the lookup.
    pub per_label: BTreeMap<u32, f64>,
}

/// Scores the labels of a neighbor set and picks the most confident one
/// (lowest label on ties). The label share uses the number of neighbors
/// actually returned, which is `k` unless the corpus is smaller.
pub fn knn_confidence(neighbors: &[Neighbor]) -> Option<LookupResult> {
    if neighbors.is_empty() {
        return None;
    }
    let k = neighbors.len() as f64;
    let mut groups: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
    for n in neighbors {
        let g = groups.entry(n.label).or_default();
        g.0 += 1;
        g.1 += 1.0 / n.distance.max(DISTANCE_FLOOR);
    }
    let per_label: BTreeMap<u32, f64> = groups
        .into_iter()
        .map(|(label, (m, inv_sum))| (label, (m as f64 / k) * inv_sum))
        .collect();
    let (&label, &confidence) = per_label
        .iter()
        .reduce(|best, cur| if cur.1 > best.1 { cur } else { best })?;
    Some(LookupResult {
        label,
        confidence,
        per_label,
    })
}

impl LayerCache {
    pub fn mode(&self) -> CacheMode {
        match self.contents {
            CacheContents::Knn { .. } => CacheMode::Knn,
            CacheContents::Centroid { .. } => CacheMode::Kmeans,
        }
    }

    pub fn len(&self) -> usize {
        match &self.contents {
            CacheContents::Knn { points, .. } => points.rows(),
            CacheContents::Centroid { centroids, .. } => centroids.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, embedding: &[f32]) -> Result<LookupResult> {
        if embedding.len() != self.embed_dim {
            return Err(Error::arg(format!(
                "layer {} cache expects embedding dim {}, got {}",
                self.layer_index,
                self.embed_dim,
                embedding.len()
            )));
        }
        match &self.contents {
            CacheContents::Knn { points, labels, k } => {
                let set = knn_query(points, labels, embedding, *k)?;
                knn_confidence(&set.entries).ok_or_else(|| {
                    Error::Config(format!("layer {} cache is empty", self.layer_index))
                })
            }
            CacheContents::Centroid {
                centroids,
                labels,
                fractions,
            } => {
                let mut best: Option<(usize, f64)> = None;
                for (i, c) in centroids.iter_rows().enumerate() {
                    let d = squared_distance(c, embedding);
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((i, d));
                    }
                }
                let (i, d2) = best.ok_or_else(|| {
                    Error::Config(format!("layer {} cache is empty", self.layer_index))
                })?;
                let confidence = f64::from(fractions[i]) / d2.sqrt().max(DISTANCE_FLOOR);
                Ok(LookupResult {
                    label: labels[i],
                    confidence,
                    per_label: BTreeMap::from([(labels[i], confidence)]),
                })
            }
        }
    }

    /// Bytes held by the cache: 4 per stored float, 4 per label, and for
    /// centroid caches 4 more per fraction.
    pub fn memory_bytes(&self) -> u64 {
        match self.contents {
            CacheContents::Knn { .. } => knn_bytes(self.len() as u64, self.embed_dim as u64),
            CacheContents::Centroid { .. } => {
                centroid_bytes(self.len() as u64, self.embed_dim as u64)
            }
        }
    }

    /// Layout: magic, version, mode `u8` (0 = k-NN, 1 = centroid), `u64` k or
    /// C, `u64` embed dim, f32 point/centroid block, u32 label block, and for
    /// centroid caches an f32 fraction block. A k-NN file's row count follows
    /// from its length.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(MAGIC);
        match &self.contents {
            CacheContents::Knn { points, labels, k } => {
                w.u8(0);
                w.u64(*k as u64);
                w.u64(self.embed_dim as u64);
                w.f32s(points.as_slice());
                w.u32s(labels);
            }
            CacheContents::Centroid {
                centroids,
                labels,
                fractions,
            } => {
                w.u8(1);
                w.u64(centroids.rows() as u64);
                w.u64(self.embed_dim as u64);
                w.f32s(centroids.as_slice());
                w.u32s(labels);
                w.f32s(fractions);
            }
        }
        w.save(path)
    }

    pub fn load(path: &Path, layer_index: usize) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        let mut r = Reader::open(path, &bytes, MAGIC)?;
        let mode = r.u8()?;
        let count = r.len()?;
        let embed_dim = r.len()?;
        if embed_dim == 0 {
            return Err(r.err("zero embedding dim"));
        }
        let contents = match mode {
            0 => {
                if count == 0 {
                    return Err(r.err("k must be at least 1"));
                }
                let row_bytes = embed_dim * 4 + 4;
                if r.remaining() % row_bytes != 0 {
                    return Err(r.err(format!(
                        "{} payload bytes is not a whole number of {row_bytes}-byte entries",
                        r.remaining()
                    )));
                }
                let rows = r.remaining() / row_bytes;
                let points = Matrix::new(rows, embed_dim, r.f32s(rows * embed_dim)?)?;
                let labels = r.u32s(rows)?;
                CacheContents::Knn {
                    points,
                    labels,
                    k: count,
                }
            }
            1 => {
                let n = count
                    .checked_mul(embed_dim)
                    .ok_or_else(|| r.err("shape overflow"))?;
                let centroids = Matrix::new(count, embed_dim, r.f32s(n)?)?;
                let labels = r.u32s(count)?;
                let fractions = r.f32s(count)?;
                if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
                    return Err(r.err(format!("majority fraction {f} outside (0, 1]")));
                }
                CacheContents::Centroid {
                    centroids,
                    labels,
                    fractions,
                }
            }
            other => return Err(r.err(format!("unknown cache mode {other}"))),
        };
        r.finish()?;
        Ok(Self {
            layer_index,
            embed_dim,
            contents,
        })
    }
}

pub fn knn_bytes(rows: u64, dim: u64) -> u64 {
    rows * dim * 4 + rows * 4
}

pub fn centroid_bytes(clusters: u64, dim: u64) -> u64 {
    clusters * dim * 4 + clusters * (4 + 4)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMemory {
    pub layer: usize,
    pub mode: CacheMode,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryReport {
    pub layers: Vec<LayerMemory>,
    pub total: u64,
}

pub fn memory_bytes(caches: &[LayerCache]) -> MemoryReport {
    let layers: Vec<LayerMemory> = caches
        .iter()
        .map(|c| LayerMemory {
            layer: c.layer_index,
            mode: c.mode(),
            bytes: c.memory_bytes(),
        })
        .collect();
    let total = layers.iter().map(|l| l.bytes).sum();
    MemoryReport { layers, total }
}

/// Reduces a raw activation row and looks it up. Calibration and inference
/// both go through here so they see bit-identical confidences.
pub fn reduced_lookup(
    reducer: &Reducer,
    cache: &LayerCache,
    activation: &[f32],
) -> Result<LookupResult> {
    let embedding = reducer.embed(activation)?;
    cache.lookup(&embedding)
}

/// Reducer for `layer`, checked against the trace's layer dimension.
pub(crate) fn reducer_for(reducers: &[Reducer], layer: usize, dim: usize) -> Result<&Reducer> {
    let r = reducers
        .iter()
        .find(|r| r.layer_index == layer)
        .ok_or_else(|| Error::Config(format!("no reducer for layer {layer}")))?;
    if r.input_dim != dim {
        return Err(Error::Config(format!(
            "layer {layer} reducer expects dim {}, trace layer has {dim}",
            r.input_dim
        )));
    }
    Ok(r)
}

fn reduced_train(
    trace: &ActivationTrace,
    reducers: &[Reducer],
) -> Result<Vec<(usize, Matrix, usize)>> {
    let train = trace.split(Split::Train)?;
    if train.is_empty() {
        return Err(Error::arg("training split is empty; cannot build a cache"));
    }
    trace
        .layers
        .iter()
        .map(|meta| {
            let r = reducer_for(reducers, meta.index, meta.dim)?;
            let emb = r.apply(&train.activations[meta.index])?;
            Ok((meta.index, emb, r.embed_dim))
        })
        .collect()
}

/// Caches every reduced training embedding with its model label, per layer.
pub fn construct_knn_cache(
    trace: &ActivationTrace,
    reducers: &[Reducer],
    k: usize,
) -> Result<Vec<LayerCache>> {
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    let labels = &trace.split(Split::Train)?.model_labels;
    Ok(reduced_train(trace, reducers)?
        .into_iter()
        .map(|(layer_index, points, embed_dim)| LayerCache {
            layer_index,
            embed_dim,
            contents: CacheContents::Knn {
                points,
                labels: labels.clone(),
                k,
            },
        })
        .collect())
}

/// Clusters each layer's reduced embeddings and keeps one entry per
/// non-empty cluster. Layer `l` is clustered with seed `seed + l`.
pub fn construct_centroid_cache(
    trace: &ActivationTrace,
    reducers: &[Reducer],
    clusters: usize,
    seed: u64,
) -> Result<Vec<LayerCache>> {
    let labels = &trace.split(Split::Train)?.model_labels;
    reduced_train(trace, reducers)?
        .into_par_iter()
        .map(|(layer_index, points, embed_dim)| {
            let cfg = KMeansConfig::new(clusters, seed.wrapping_add(layer_index as u64));
            let fit = kmeans_fit(&points, &cfg)?;
            let summary = cluster_summary(&fit, labels)?;
            let rows: Vec<&[f32]> = summary.iter().map(|s| s.centroid.as_slice()).collect();
            Ok(LayerCache {
                layer_index,
                embed_dim,
                contents: CacheContents::Centroid {
                    centroids: Matrix::from_rows(&rows)?,
                    labels: summary.iter().map(|s| s.majority_label).collect(),
                    fractions: summary.iter().map(|s| s.majority_fraction as f32).collect(),
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SgdConfig;
    use crate::trace::{
        forward_collect, generate_synthetic, train_reference_model, SplitCounts, SynthConfig,
    };
    use proptest::prelude::*;

    const A: u32 = 0;
    const B: u32 = 1;

    fn n(label: u32, distance: f64) -> Neighbor {
        Neighbor {
            index: 0,
            label,
            distance,
        }
    }

    fn trace(train: usize) -> ActivationTrace {
        let data = generate_synthetic(&SynthConfig {
            num_classes: 3,
            input_dim: 6,
            counts: SplitCounts {
                train,
                val: 10,
                test: 10,
            },
            separation: 6.0,
            seed: 4,
        })
        .unwrap();
        let sgd = SgdConfig {
            epochs: 2,
            learning_rate: 0.01,
            batch_size: 16,
        };
        let (model, _) = train_reference_model(&data, &[8, 5], sgd, 1).unwrap();
        forward_collect(&model, &data).unwrap()
    }

    fn identities(t: &ActivationTrace) -> Vec<Reducer> {
        t.layers
            .iter()
            .map(|m| Reducer::identity(m.index, m.dim))
            .collect()
    }

    #[test]
    fn knn_worked_example() {
        let r = knn_confidence(&[n(A, 1.0), n(A, 2.0), n(B, 2.0)]).unwrap();
        assert_eq!(r.label, A);
        assert!((r.confidence - 1.0).abs() < 1e-15);
        assert!((r.per_label[&B] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn centroid_worked_example() {
        let cache = LayerCache {
            layer_index: 0,
            embed_dim: 2,
            contents: CacheContents::Centroid {
                centroids: Matrix::from_rows(&[[0.0f32, 0.0], [10.0, 0.0]]).unwrap(),
                labels: vec![A, B],
                fractions: vec![0.9, 0.6],
            },
        };
        let r = cache.lookup(&[2.0, 0.0]).unwrap();
        assert_eq!(r.label, A);
        assert!((r.confidence - 0.45).abs() < 1e-7);
    }

    #[test]
    fn exact_hit_is_clamped() {
        let cache = LayerCache {
            layer_index: 0,
            embed_dim: 1,
            contents: CacheContents::Knn {
                points: Matrix::from_rows(&[[0.0f32], [1.0], [3.0]]).unwrap(),
                labels: vec![A, B, B],
                k: 3,
            },
        };
        let r = cache.lookup(&[0.0]).unwrap();
        assert_eq!(r.label, A);
        assert_eq!(r.confidence, (1.0 / 3.0) * (1.0 / DISTANCE_FLOOR));
    }

    #[test]
    fn lookup_dim_mismatch() {
        let cache = LayerCache {
            layer_index: 0,
            embed_dim: 2,
            contents: CacheContents::Knn {
                points: Matrix::zeros(1, 2),
                labels: vec![0],
                k: 1,
            },
        };
        assert!(matches!(cache.lookup(&[0.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn knn_cache_holds_every_training_point() {
        let t = trace(37);
        let caches = construct_knn_cache(&t, &identities(&t), 5).unwrap();
        assert_eq!(caches.len(), 2);
        assert!(caches.iter().all(|c| c.len() == 37));
    }

    #[test]
    fn single_example_cache() {
        let t = trace(1);
        let caches = construct_knn_cache(&t, &identities(&t), 5).unwrap();
        assert!(caches.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn empty_train_split_refuses() {
        let mut t = trace(5);
        let train = t.splits.get_mut(&Split::Train).unwrap();
        for m in &mut train.activations {
            *m = Matrix::zeros(0, m.cols());
        }
        train.model_labels.clear();
        train.true_labels = None;
        assert!(construct_knn_cache(&t, &identities(&t), 3).is_err());
    }

    #[test]
    fn missing_reducer_is_config_error() {
        let t = trace(10);
        let mut reducers = identities(&t);
        reducers.pop();
        assert!(matches!(
            construct_knn_cache(&t, &reducers, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn centroid_cache_with_one_cluster_per_point() {
        let t = trace(30);
        let caches = construct_centroid_cache(&t, &identities(&t), 30, 2).unwrap();
        for c in &caches {
            let CacheContents::Centroid { fractions, .. } = &c.contents else {
                panic!("wrong mode")
            };
            // Duplicate ReLU rows may share a center, so allow fewer entries.
            assert!(c.len() <= 30);
            assert!(fractions.iter().all(|&f| f > 0.0 && f <= 1.0));
        }
    }

    #[test]
    fn centroid_cache_entry_count_and_single_label_purity() {
        let mut t = trace(60);
        let caches = construct_centroid_cache(&t, &identities(&t), 7, 0).unwrap();
        assert!(caches.iter().all(|c| c.len() <= 7 && !c.is_empty()));

        let train = t.splits.get_mut(&Split::Train).unwrap();
        train.model_labels.iter_mut().for_each(|l| *l = 2);
        let caches = construct_centroid_cache(&t, &identities(&t), 7, 0).unwrap();
        for c in &caches {
            let CacheContents::Centroid {
                fractions, labels, ..
            } = &c.contents
            else {
                panic!("wrong mode")
            };
            assert!(fractions.iter().all(|&f| f == 1.0));
            assert!(labels.iter().all(|&l| l == 2));
        }
    }

    #[test]
    fn memory_arithmetic() {
        assert_eq!(knn_bytes(1000, 16), 68_000);
        let cache = LayerCache {
            layer_index: 0,
            embed_dim: 16,
            contents: CacheContents::Knn {
                points: Matrix::zeros(1000, 16),
                labels: vec![0; 1000],
                k: 5,
            },
        };
        let report = memory_bytes(&[cache]);
        assert_eq!(report.total, 68_000);
        assert_eq!(centroid_bytes(200, 1024), 200 * 1024 * 4 + 200 * 8);
    }

    #[test]
    fn file_round_trip_both_modes() {
        let t = trace(25);
        let dir = tempfile::tempdir().unwrap();
        let knn = construct_knn_cache(&t, &identities(&t), 4).unwrap();
        let km = construct_centroid_cache(&t, &identities(&t), 5, 1).unwrap();
        for c in knn.iter().chain(&km) {
            let p = dir.path().join(format!("cache_layer{}.fzc", c.layer_index));
            c.save(&p).unwrap();
            assert_eq!(&LayerCache::load(&p, c.layer_index).unwrap(), c);
        }
    }

    #[test]
    fn corrupt_cache_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache_layer0.fzc");
        let cache = LayerCache {
            layer_index: 0,
            embed_dim: 3,
            contents: CacheContents::Knn {
                points: Matrix::zeros(4, 3),
                labels: vec![0; 4],
                k: 2,
            },
        };
        cache.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 8 + 1 + 16 + 4 * 12 + 16);
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(LayerCache::load(&p, 0), Err(Error::Format { .. })));
        bytes[8] = 7;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(LayerCache::load(&p, 0), Err(Error::Format { .. })));
    }

    fn neighbor_sets() -> impl Strategy<Value = Vec<Neighbor>> {
        prop::collection::vec((0u32..4, 1e-3f64..10.0), 1..12).prop_map(|v| {
            let mut ns: Vec<Neighbor> = v.into_iter().map(|(l, d)| n(l, d)).collect();
            ns.sort_by(|a, b| a.distance.total_cmp(&b.distance));
            ns
        })
    }

    proptest! {
        #[test]
        fn scaling_distances_rescales_confidence(ns in neighbor_sets(), s in 0.01f64..100.0) {
            let base = knn_confidence(&ns).unwrap();
            let scaled: Vec<Neighbor> = ns.iter().map(|x| n(x.label, x.distance * s)).collect();
            let got = knn_confidence(&scaled).unwrap();
            for (l, c) in &base.per_label {
                let rel = (got.per_label[l] - c / s).abs() / (c / s);
                prop_assert!(rel < 1e-12);
            }
            // The argmax can only move when two labels tie up to rounding.
            if got.label != base.label {
                let (a, b) = (base.per_label[&base.label], base.per_label[&got.label]);
                prop_assert!((a - b).abs() <= 1e-12 * a);
            }
        }

        #[test]
        fn knn_k1_and_unit_centroids_agree(
            rows in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 3), 1..20),
            query in prop::collection::vec(-5.0f32..5.0, 3),
        ) {
            let points = Matrix::from_rows(&rows).unwrap();
            let labels: Vec<u32> = (0..rows.len() as u32).map(|i| i % 3).collect();
            let knn = LayerCache { layer_index: 0, embed_dim: 3, contents: CacheContents::Knn {
                points: points.clone(), labels: labels.clone(), k: 1 } };
            let cen = LayerCache { layer_index: 0, embed_dim: 3, contents: CacheContents::Centroid {
                centroids: points, labels, fractions: vec![1.0; rows.len()] } };
            let a = knn.lookup(&query).unwrap();
            let b = cen.lookup(&query).unwrap();
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(a.confidence, b.confidence);
        }

        #[test]
        fn duplicate_of_query_wins(
            rows in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 2), 1..20),
            query in prop::collection::vec(-5.0f32..5.0, 2),
            k in 1usize..6,
        ) {
            let mut rows = rows;
            let mut labels: Vec<u32> = vec![0; rows.len()];
            rows.push(query.clone());
            labels.push(9);
            let cache = LayerCache { layer_index: 0, embed_dim: 2, contents: CacheContents::Knn {
                points: Matrix::from_rows(&rows).unwrap(), labels, k } };
            prop_assert_eq!(cache.lookup(&query).unwrap().label, 9);
        }
    }
}
