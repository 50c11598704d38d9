//! Trace directory layout.
//!
//! ```text
//! manifest.json
//! <split>_layer<k>.act        "FZTR" | u32 version | u64 count | u64 dim | count*dim f32
//! <split>_model_labels.lbl    "FZLB" | u32 version | u64 count | count u32
//! <split>_true_labels.lbl     (optional, same layout)
//! ```
//!
//! All integers and floats are little-endian; activation rows are stored
//! row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ActivationTrace, LayerMeta, Split, SplitData};
use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
const ACT_MAGIC: &[u8; 4] = b"FZTR";
const LBL_MAGIC: &[u8; 4] = b"FZLB";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dataset_name: String,
    num_classes: usize,
    layers: Vec<LayerMeta>,
    splits: Vec<SplitEntry>,
    flatten_order: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitEntry {
    name: Split,
    count: usize,
}

fn act_file(split: Split, layer: usize) -> String {
    format!("{split}_layer{layer}.act")
}

fn model_labels_file(split: Split) -> String {
    format!("{split}_model_labels.lbl")
}

fn true_labels_file(split: Split) -> String {
    format!("{split}_true_labels.lbl")
}

/// Writes blobs first and the manifest last; returns the manifest path.
pub fn write_trace(trace: &ActivationTrace, dir: &Path) -> Result<PathBuf> {
    trace.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (&split, data) in &trace.splits {
        for (layer, m) in data.activations.iter().enumerate() {
            write_activations(&dir.join(act_file(split, layer)), m)?;
        }
        write_labels(&dir.join(model_labels_file(split)), &data.model_labels)?;
        if let Some(t) = &data.true_labels {
            write_labels(&dir.join(true_labels_file(split)), t)?;
        }
    }
    let manifest = Manifest {
        dataset_name: trace.dataset_name.clone(),
        num_classes: trace.num_classes,
        layers: trace.layers.clone(),
        splits: trace
            .splits
            .iter()
            .map(|(&name, d)| SplitEntry {
                name,
                count: d.len(),
            })
            .collect(),
        flatten_order: trace.flatten_order.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    binio::write_atomic(&path, json.as_bytes())?;
    Ok(path)
}

/// Writes one matrix as a standalone activation blob.
pub fn write_activations(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = Writer::new(ACT_MAGIC);
    w.u64(m.rows() as u64);
    w.u64(m.cols() as u64);
    w.f32s(m.as_slice());
    w.save(path)
}

pub fn read_activations(path: &Path) -> Result<Matrix> {
    let bytes = binio::read_file(path)?;
    let mut r = Reader::open(path, &bytes, ACT_MAGIC)?;
    let count = r.len()?;
    let dim = r.len()?;
    let n = count
        .checked_mul(dim)
        .ok_or_else(|| r.err("shape overflow"))?;
    let data = r.f32s(n)?;
    r.finish()?;
    Matrix::new(count, dim, data)
}

fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let mut w = Writer::new(LBL_MAGIC);
    w.u64(labels.len() as u64);
    w.u32s(labels);
    w.save(path)
}

pub fn read_trace(dir: &Path) -> Result<ActivationTrace> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;

    let mut splits = BTreeMap::new();
    for entry in &manifest.splits {
        let split = entry.name;
        let mut activations = Vec::with_capacity(manifest.layers.len());
        for meta in &manifest.layers {
            let path = dir.join(act_file(split, meta.index));
            let m = read_activations(&path)?;
            if m.rows() != entry.count || m.cols() != meta.dim {
                return Err(Error::format(
                    path,
                    format!(
                        "blob is {}x{} but manifest says {}x{}",
                        m.rows(),
                        m.cols(),
                        entry.count,
                        meta.dim
                    ),
                ));
            }
            activations.push(m);
        }
        let model_labels = read_labels(&dir.join(model_labels_file(split)), entry.count)?;
        let true_path = dir.join(true_labels_file(split));
        let true_labels = if true_path.exists() {
            Some(read_labels(&true_path, entry.count)?)
        } else {
            None
        };
        for (labels, path) in std::iter::once((&model_labels, dir.join(model_labels_file(split))))
            .chain(true_labels.as_ref().map(|t| (t, true_path.clone())))
        {
            if let Some(&bad) = labels.iter().find(|&&l| l as usize >= manifest.num_classes) {
                return Err(Error::format(
                    path,
                    format!("label {bad} outside [0, {})", manifest.num_classes),
                ));
            }
        }
        splits.insert(
            split,
            SplitData {
                activations,
                model_labels,
                true_labels,
            },
        );
    }

    let trace = ActivationTrace {
        dataset_name: manifest.dataset_name,
        num_classes: manifest.num_classes,
        layers: manifest.layers,
        splits,
        flatten_order: manifest.flatten_order,
    };
    trace
        .validate()
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    Ok(trace)
}

fn read_labels(path: &Path, expected: usize) -> Result<Vec<u32>> {
    let bytes = binio::read_file(path)?;
    let mut r = Reader::open(path, &bytes, LBL_MAGIC)?;
    let count = r.len()?;
    if count != expected {
        return Err(r.err(format!("holds {count} labels but manifest says {expected}")));
    }
    let labels = r.u32s(count)?;
    r.finish()?;
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SgdConfig;
    use crate::trace::{
        forward_collect, generate_synthetic, train_reference_model, SplitCounts, SynthConfig,
    };

    fn sample_trace() -> ActivationTrace {
        let data = generate_synthetic(&SynthConfig {
            num_classes: 3,
            input_dim: 4,
            counts: SplitCounts {
                train: 20,
                val: 7,
                test: 5,
            },
            separation: 4.0,
            seed: 1,
        })
        .unwrap();
        let sgd = SgdConfig {
            epochs: 1,
            learning_rate: 0.01,
            batch_size: 8,
        };
        let (model, _) = train_reference_model(&data, &[6, 3], sgd, 0).unwrap();
        forward_collect(&model, &data).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let t = sample_trace();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_trace(&t, dir.path()).unwrap();
        assert!(manifest.ends_with(MANIFEST_FILE));
        let back = read_trace(dir.path()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn activation_blob_layout_is_bit_exact() {
        let t = sample_trace();
        let dir = tempfile::tempdir().unwrap();
        write_trace(&t, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("val_layer1.act")).unwrap();
        assert_eq!(&bytes[..4], b"FZTR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 24 + 7 * 3 * 4);
        let first = f32::from_le_bytes(bytes[24..28].try_into().unwrap());
        assert_eq!(
            first.to_bits(),
            t.splits[&Split::Val].activations[1].row(0)[0].to_bits()
        );

        let lbl = fs::read(dir.path().join("test_model_labels.lbl")).unwrap();
        assert_eq!(&lbl[..4], b"FZLB");
        assert_eq!(lbl.len(), 16 + 5 * 4);
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let t = sample_trace();
        let dir = tempfile::tempdir().unwrap();
        write_trace(&t, dir.path()).unwrap();
        let p = dir.path().join("train_layer0.act");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, bytes).unwrap();
        match read_trace(dir.path()) {
            Err(Error::Format { file, .. }) => assert_eq!(file, p),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_format_error() {
        let t = sample_trace();
        let dir = tempfile::tempdir().unwrap();
        write_trace(&t, dir.path()).unwrap();
        let p = dir.path().join("test_layer0.act");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_trace(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_dim_mismatch_is_consistency_error() {
        let t = sample_trace();
        let dir = tempfile::tempdir().unwrap();
        let mp = write_trace(&t, dir.path()).unwrap();
        let mut m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&mp).unwrap()).unwrap();
        m["layers"][0]["dim"] = serde_json::json!(5);
        fs::write(&mp, serde_json::to_string(&m).unwrap()).unwrap();
        match read_trace(dir.path()) {
            Err(Error::Format { file, reason }) => {
                assert!(file.to_string_lossy().ends_with(".act"), "{file:?}");
                assert!(reason.contains("manifest"), "{reason}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let t = sample_trace();
        let dir = tempfile::tempdir().unwrap();
        write_trace(&t, dir.path()).unwrap();
        let p = dir.path().join("val_model_labels.lbl");
        let mut bytes = fs::read(&p).unwrap();
        bytes[16..20].copy_from_slice(&9u32.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_trace(dir.path()), Err(Error::Format { .. })));
    }
}
