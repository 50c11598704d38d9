//! Measurement artifacts: frozen-layer CDFs, agreement accuracy, cluster
//! purity, lookup/forward timing, and threshold sweeps, plus their CSV forms.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::cache::MemoryReport;
use crate::engine::{
    batch_evaluate, EvalInput, EvalMode, EvaluationRun, ExampleRecord, LayerStack,
};
use crate::error::{Error, Result};
use crate::neighbors::{cluster_summary, kmeans_fit, KMeansConfig};
use crate::reduce::Reducer;
use crate::threshold::{scale_thresholds, ThresholdTable};
use crate::trace::{ActivationTrace, Split};

/// Fraction of all examples frozen at or before each layer. Examples that
/// never froze count in the denominator only.
pub fn frozen_cdf(records: &[ExampleRecord], num_layers: usize) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::arg("cannot build a CDF from an empty run"));
    }
    let mut counts = vec![0usize; num_layers];
    for r in records {
        if let Some(l) = r.frozen_layer {
            if l >= num_layers {
                return Err(Error::arg(format!(
                    "record {} froze at layer {l}, run has {num_layers} layers",
                    r.id
                )));
            }
            counts[l] += 1;
        }
    }
    let n = records.len() as f64;
    let mut acc = 0usize;
    Ok(counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / n
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Agreement {
    /// Share of frozen examples whose label equals the model's; `None` when
    /// nothing froze.
    pub frozen_only: Option<f64>,
    /// Share of all examples whose returned label equals the model's.
    pub overall: f64,
    pub frozen_fraction: f64,
}

pub fn agreement_accuracy(records: &[ExampleRecord]) -> Result<Agreement> {
    if records.is_empty() {
        return Err(Error::arg("cannot score an empty run"));
    }
    let frozen: Vec<&ExampleRecord> = records
        .iter()
        .filter(|r| r.frozen_layer.is_some())
        .collect();
    let frozen_only = (!frozen.is_empty())
        .then(|| frozen.iter().filter(|r| r.agrees()).count() as f64 / frozen.len() as f64);
    let overall = records.iter().filter(|r| r.agrees()).count() as f64 / records.len() as f64;
    Ok(Agreement {
        frozen_only,
        overall,
        frozen_fraction: frozen.len() as f64 / records.len() as f64,
    })
}

/// Which labels purity is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Model,
    /// Ground truth; spelled `truth` in configs so it cannot parse as a boolean.
    #[serde(rename = "truth")]
    True,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterPurity {
    pub cluster: usize,
    pub fraction: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerPurity {
    pub layer: usize,
    pub clusters: Vec<ClusterPurity>,
    /// Unweighted mean of the per-cluster majority fractions.
    pub mean_fraction: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PurityConfig<'a> {
    pub split: Split,
    pub clusters: usize,
    pub seed: u64,
    /// `None` clusters raw activations.
    pub reducers: Option<&'a [Reducer]>,
    pub labels: LabelSource,
}

/// k-means over each requested layer followed by majority-label shares per
/// cluster. Layer `l` uses seed `seed + l`.
pub fn purity_report(
    trace: &ActivationTrace,
    layers: &[usize],
    cfg: &PurityConfig<'_>,
) -> Result<Vec<LayerPurity>> {
    let data = trace.split(cfg.split)?;
    let labels = match cfg.labels {
        LabelSource::Model => &data.model_labels,
        LabelSource::True => data
            .true_labels
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} split has no true labels", cfg.split)))?,
    };
    layers
        .iter()
        .map(|&layer| {
            let meta = trace
                .layers
                .get(layer)
                .ok_or_else(|| Error::arg(format!("layer {layer} does not exist")))?;
            let points = match cfg.reducers {
                Some(rs) => crate::cache::reducer_for(rs, layer, meta.dim)?
                    .apply(&data.activations[layer])?,
                None => data.activations[layer].clone(),
            };
            let fit = kmeans_fit(
                &points,
                &KMeansConfig::new(cfg.clusters, cfg.seed.wrapping_add(layer as u64)),
            )?;
            let summary = cluster_summary(&fit, labels)?;
            let clusters: Vec<ClusterPurity> = summary
                .iter()
                .map(|s| ClusterPurity {
                    cluster: s.cluster,
                    fraction: s.majority_fraction,
                    size: s.size,
                })
                .collect();
            let mean_fraction =
                clusters.iter().map(|c| c.fraction).sum::<f64>() / clusters.len() as f64;
            Ok(LayerPurity {
                layer,
                clusters,
                mean_fraction,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub mean_lookup_ns: Option<f64>,
    pub lookup_samples: u64,
    pub mean_forward_ns: Option<f64>,
    pub forward_samples: u64,
    /// Mean per-layer forward time divided by mean lookup time.
    pub forward_to_lookup: Option<f64>,
}

/// Mean per-layer lookup and forward cost; `None` for a run with no examples.
pub fn timing_report(run: &EvaluationRun) -> Option<TimingReport> {
    if run.records.is_empty() {
        return None;
    }
    let mean = |ts: &[crate::engine::LayerTiming]| {
        let total: u64 = ts.iter().map(|t| t.total_ns).sum();
        let n: u64 = ts.iter().map(|t| t.count).sum();
        ((n > 0).then(|| total as f64 / n as f64), n)
    };
    let (mean_lookup_ns, lookup_samples) = mean(&run.timing.lookup);
    let (mean_forward_ns, forward_samples) = mean(&run.timing.forward);
    let forward_to_lookup = match (mean_forward_ns, mean_lookup_ns) {
        (Some(f), Some(l)) if l > 0.0 => Some(f / l),
        _ => None,
    };
    Some(TimingReport {
        mean_lookup_ns,
        lookup_samples,
        mean_forward_ns,
        forward_samples,
        forward_to_lookup,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    /// Percentage (0-100) of examples frozen at any layer.
    pub frozen_pct: f64,
    pub frozen_acc: Option<f64>,
}

/// Re-evaluates the split with the base thresholds scaled by each `lambda`.
pub fn sweep(
    input: EvalInput<'_>,
    stack: LayerStack<'_>,
    base: &ThresholdTable,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::arg("sweep grid is empty"));
    }
    grid.iter()
        .map(|&lambda| {
            let table = scale_thresholds(base, lambda)?;
            let run = batch_evaluate(input, stack, &table, EvalMode::Engine)?;
            let acc = agreement_accuracy(&run.records)?;
            Ok(SweepRow {
                lambda,
                frozen_pct: 100.0 * acc.frozen_fraction,
                frozen_acc: acc.frozen_only,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn save_csv(path: &Path, text: &str) -> Result<()> {
    binio::write_atomic(path, text.as_bytes())
}

/// `layer,engine_frac,oracle_frac`
pub fn write_cdf_csv(path: &Path, engine: &[f64], oracle: &[f64]) -> Result<()> {
    let mut s = String::from("layer,engine_frac,oracle_frac\n");
    for (l, (e, o)) in engine.iter().zip(oracle).enumerate() {
        writeln!(s, "{l},{e},{o}").unwrap();
    }
    save_csv(path, &s)
}

/// `lambda,frozen_pct,frozen_acc`; accuracy is blank when nothing froze.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut s = String::from("lambda,frozen_pct,frozen_acc\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.lambda, r.frozen_pct, opt(r.frozen_acc)).unwrap();
    }
    save_csv(path, &s)
}

/// `cluster,fraction,size`
pub fn write_purity_csv(path: &Path, layer: &LayerPurity) -> Result<()> {
    let mut s = String::from("cluster,fraction,size\n");
    for c in &layer.clusters {
        writeln!(s, "{},{},{}", c.cluster, c.fraction, c.size).unwrap();
    }
    save_csv(path, &s)
}

/// `layer,mode,bytes` with a final `total` row.
pub fn write_memory_csv(path: &Path, report: &MemoryReport) -> Result<()> {
    let mut s = String::from("layer,mode,bytes\n");
    for l in &report.layers {
        writeln!(s, "{},{},{}", l.layer, l.mode.as_str(), l.bytes).unwrap();
    }
    let mode = report.layers.first().map_or("", |l| l.mode.as_str());
    writeln!(s, "total,{mode},{}", report.total).unwrap();
    save_csv(path, &s)
}

/// `quantity,mean_ns,n`
pub fn write_timing_csv(path: &Path, report: &TimingReport) -> Result<()> {
    let mut s = String::from("quantity,mean_ns,n\n");
    writeln!(
        s,
        "lookup,{},{}",
        opt(report.mean_lookup_ns),
        report.lookup_samples
    )
    .unwrap();
    writeln!(
        s,
        "layer_forward,{},{}",
        opt(report.mean_forward_ns),
        report.forward_samples
    )
    .unwrap();
    save_csv(path, &s)
}
