//! A trace written byte by byte, the way an external exporter would, runs
//! through every stage that does not need the reference model.

use std::fs;
use std::path::Path;

use freeze_core::pipeline::{ExperimentConfig, Pipeline, Stage};
use freeze_core::trace::{read_trace, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: [usize; 3] = [12, 8, 6];
const CLASSES: u32 = 3;

fn blob(path: &Path, rows: &[Vec<f32>], dim: usize) {
    let mut b = b"FZTR".to_vec();
    b.extend(1u32.to_le_bytes());
    b.extend((rows.len() as u64).to_le_bytes());
    b.extend((dim as u64).to_le_bytes());
    for r in rows {
        for v in r {
            b.extend(v.to_le_bytes());
        }
    }
    fs::write(path, b).unwrap();
}

fn labels(path: &Path, ls: &[u32]) {
    let mut b = b"FZLB".to_vec();
    b.extend(1u32.to_le_bytes());
    b.extend((ls.len() as u64).to_le_bytes());
    for l in ls {
        b.extend(l.to_le_bytes());
    }
    fs::write(path, b).unwrap();
}

fn export(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let counts = [("train", 300), ("val", 90), ("test", 60)];
    for (split, n) in counts {
        let ls: Vec<u32> = (0..n).map(|_| rng.random_range(0..CLASSES)).collect();
        for (layer, &dim) in DIMS.iter().enumerate() {
            // Class signal grows with depth.
            let rows: Vec<Vec<f32>> = ls
                .iter()
                .map(|&l| {
                    (0..dim)
                        .map(|j| {
                            let centre = if j % CLASSES as usize == l as usize {
                                1.0
                            } else {
                                0.0
                            };
                            centre * (layer + 1) as f32 + rng.random_range(-0.8..0.8)
                        })
                        .collect()
                })
                .collect();
            blob(&dir.join(format!("{split}_layer{layer}.act")), &rows, dim);
        }
        labels(&dir.join(format!("{split}_model_labels.lbl")), &ls);
    }
    let manifest = format!(
        r#"{{
  "dataset_name": "imported",
  "num_classes": {CLASSES},
  "layers": [
    {{"index": 0, "name": "block1", "dim": 12}},
    {{"index": 1, "name": "block2", "dim": 8}},
    {{"index": 2, "name": "block3", "dim": 6}}
  ],
  "splits": [
    {{"name": "train", "count": 300}},
    {{"name": "val", "count": 90}},
    {{"name": "test", "count": 60}}
  ],
  "flatten_order": "CHW"
}}"#
    );
    fs::write(dir.join("manifest.json"), manifest).unwrap();
}

#[test]
fn exported_trace_runs_through_the_pipeline() {
    let trace_dir = tempfile::tempdir().unwrap();
    export(trace_dir.path());
    let trace = read_trace(trace_dir.path()).unwrap();
    assert_eq!(trace.flatten_order, "CHW");
    assert_eq!(trace.split(Split::Val).unwrap().len(), 90);
    assert!(trace.split(Split::Test).unwrap().true_labels.is_none());

    let out = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(
        None,
        &[
            format!("trace_dir={:?}", trace_dir.path().to_str().unwrap()),
            "reducer_epochs=3".into(),
            "purity_clusters=20".into(),
        ],
    )
    .unwrap();
    let p = Pipeline::new(cfg, out.path()).unwrap();
    for stage in [
        Stage::TrainReduce,
        Stage::BuildCache,
        Stage::Thresholds,
        Stage::Infer,
        Stage::Report,
    ] {
        p.run(stage).unwrap_or_else(|e| panic!("{stage}: {e}"));
    }

    // embed_dim 32 is capped at each layer's width.
    let reducers = p.load_reducers(&trace).unwrap();
    let embed: Vec<usize> = reducers.iter().map(|r| r.embed_dim).collect();
    assert_eq!(embed, vec![12, 8, 6]);

    // No reference model: lookups are timed, forward passes are not.
    let timing = fs::read_to_string(out.path().join("timing.csv")).unwrap();
    assert!(timing.contains("\nlayer_forward,,0\n"), "{timing}");
    let cdf = fs::read_to_string(out.path().join("cdf.csv")).unwrap();
    assert_eq!(cdf.lines().count(), 1 + DIMS.len());
}
