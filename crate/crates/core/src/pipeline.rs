//! Staged experiment driver behind the `freeze` command line.
//!
//! Every stage reads its inputs from the output directory, writes its
//! artifacts there, and records a run manifest under `manifests/` holding the
//! config, the seed and a SHA-256 of every deterministic artifact it wrote.
//!
//! ```text
//! <out>/trace/                    activation trace (unless trace_dir points elsewhere)
//! <out>/model.fzm                 reference model
//! <out>/inputs/<split>.act        raw inputs, for live forward timing
//! <out>/model_report.json
//! <out>/reducers/reducer_layer<k>.fzr
//! <out>/caches/cache_layer<k>.fzc
//! <out>/thresholds.json
//! <out>/runs/<split>_{engine,oracle}.jsonl
//! <out>/{cdf,sweep,memory,timing}.csv, purity_layer<k>.csv, summary.txt
//! <out>/manifests/<stage>.json
//! ```

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio;
use crate::cache::{
    construct_centroid_cache, construct_knn_cache, memory_bytes, CacheMode, LayerCache,
};
use crate::engine::{batch_evaluate, read_records, write_records, EvalInput, EvalMode, LayerStack};
use crate::error::{Error, Result};
use crate::metrics::{
    self, agreement_accuracy, frozen_cdf, purity_report, timing_report, LabelSource, PurityConfig,
};
use crate::nn::SgdConfig;
use crate::reduce::{train_reducer, Reducer, ReducerConfig};
use crate::threshold::{compute_thresholds, ThresholdTable};
use crate::trace::{
    forward_collect, generate_synthetic, read_activations, read_trace, train_reference_model,
    write_activations, write_trace, ActivationTrace, RefModel, Split, SplitCounts, SynthConfig,
    MANIFEST_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SynthTraces,
    TrainReduce,
    BuildCache,
    Thresholds,
    Infer,
    Oracle,
    Sweep,
    Purity,
    Memory,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::SynthTraces,
        Stage::TrainReduce,
        Stage::BuildCache,
        Stage::Thresholds,
        Stage::Infer,
        Stage::Oracle,
        Stage::Sweep,
        Stage::Purity,
        Stage::Memory,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthTraces => "synth-traces",
            Stage::TrainReduce => "train-reduce",
            Stage::BuildCache => "build-cache",
            Stage::Thresholds => "thresholds",
            Stage::Infer => "infer",
            Stage::Oracle => "oracle",
            Stage::Sweep => "sweep",
            Stage::Purity => "purity",
            Stage::Memory => "memory",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every knob of an experiment. Unset keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Trace directory, relative to the output directory unless absolute.
    pub trace_dir: String,

    pub num_classes: usize,
    pub input_dim: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub separation: f64,

    pub hidden_widths: Vec<usize>,
    pub model_epochs: usize,
    pub model_learning_rate: f64,
    pub model_batch_size: usize,

    /// `false` caches raw activations through identity reducers.
    pub reduce: bool,
    pub embed_dim: usize,
    pub reducer_epochs: usize,
    pub reducer_learning_rate: f64,
    pub reducer_batch_size: usize,

    pub cache_mode: CacheMode,
    pub k: usize,
    pub clusters: usize,

    /// Layers allowed to freeze; empty means all.
    pub layers: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    pub eval_split: Split,

    pub purity_clusters: usize,
    /// Cluster raw activations instead of reduced embeddings.
    pub purity_raw: bool,
    pub purity_labels: LabelSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let r = ReducerConfig::default();
        Self {
            seed: 42,
            trace_dir: "trace".into(),
            num_classes: 5,
            input_dim: 32,
            train_count: 2000,
            val_count: 500,
            test_count: 500,
            separation: 10.0,
            hidden_widths: vec![64, 64, 64, 64],
            model_epochs: 20,
            model_learning_rate: 0.01,
            model_batch_size: 32,
            reduce: true,
            embed_dim: r.embed_dim,
            reducer_epochs: r.epochs,
            reducer_learning_rate: 0.01,
            reducer_batch_size: r.batch_size,
            cache_mode: CacheMode::Knn,
            k: 5,
            clusters: 200,
            layers: Vec::new(),
            lambda_grid: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            eval_split: Split::Test,
            purity_clusters: 200,
            purity_raw: false,
            purity_labels: LabelSource::Model,
        }
    }
}

impl ExperimentConfig {
    /// Parses a `key = value` file (TOML syntax).
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    /// Reads an optional config file and applies `key=value` overrides in
    /// order. Override values use TOML syntax; anything that does not parse
    /// is taken as a bare string, so `cache_mode=kmeans` works unquoted.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            let value = value.trim();
            let parsed = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults in config-file syntax.
    pub fn defaults_toml() -> String {
        toml::to_string(&Self::default()).expect("defaults serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("input_dim", self.input_dim),
            ("train_count", self.train_count),
            ("val_count", self.val_count),
            ("test_count", self.test_count),
            ("model_epochs", self.model_epochs),
            ("model_batch_size", self.model_batch_size),
            ("embed_dim", self.embed_dim),
            ("reducer_epochs", self.reducer_epochs),
            ("reducer_batch_size", self.reducer_batch_size),
            ("k", self.k),
            ("clusters", self.clusters),
            ("purity_clusters", self.purity_clusters),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        for (key, v) in [
            ("separation", self.separation),
            ("model_learning_rate", self.model_learning_rate),
            ("reducer_learning_rate", self.reducer_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} must be positive, got {v}")));
            }
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::Config(
                "hidden_widths needs at least one positive width".into(),
            ));
        }
        if self.lambda_grid.is_empty() {
            return Err(Error::Config("lambda_grid is empty".into()));
        }
        if let Some(l) = self
            .lambda_grid
            .iter()
            .find(|l| !(**l >= 0.0 && l.is_finite()))
        {
            return Err(Error::Config(format!("lambda_grid entry {l} is negative")));
        }
        if self.trace_dir.is_empty() {
            return Err(Error::Config("trace_dir is empty".into()));
        }
        Ok(())
    }

    fn reducer_config(&self, layer_dim: usize) -> ReducerConfig {
        ReducerConfig {
            embed_dim: self.embed_dim.min(layer_dim),
            epochs: self.reducer_epochs,
            learning_rate: self.reducer_learning_rate as f32,
            batch_size: self.reducer_batch_size,
        }
    }
}

/// What a stage wrote and a few lines worth printing.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub stage: Stage,
    pub artifacts: Vec<PathBuf>,
    pub notes: Vec<String>,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    stage: &'static str,
    seed: u64,
    config: &'a ExperimentConfig,
    artifacts: Vec<ArtifactHash>,
    /// Wall-clock artifacts: rewritten on every run, never hashed.
    timing_artifacts: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ArtifactHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelReport {
    train_accuracy: f64,
    final_loss: f64,
    test_accuracy: Option<f64>,
}

/// Drives the stages for one config and output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            out: out.into(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn run(&self, stage: Stage) -> Result<StageOutput> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        match stage {
            Stage::SynthTraces => self.synth_traces(),
            Stage::TrainReduce => self.train_reduce(),
            Stage::BuildCache => self.build_cache(),
            Stage::Thresholds => self.thresholds(),
            Stage::Infer => self.infer(),
            Stage::Oracle => self.oracle(),
            Stage::Sweep => self.sweep(),
            Stage::Purity => self.purity(),
            Stage::Memory => self.memory(),
            Stage::Report => self.report(),
        }
    }

    /// Runs every stage from `synth-traces` through `report`.
    pub fn run_all(&self) -> Result<Vec<StageOutput>> {
        [
            Stage::SynthTraces,
            Stage::TrainReduce,
            Stage::BuildCache,
            Stage::Thresholds,
            Stage::Infer,
            Stage::Report,
        ]
        .into_iter()
        .map(|s| self.run(s))
        .collect()
    }

    pub fn trace_dir(&self) -> PathBuf {
        self.out.join(&self.cfg.trace_dir)
    }

    pub fn model_path(&self) -> PathBuf {
        self.out.join("model.fzm")
    }

    pub fn inputs_path(&self, split: Split) -> PathBuf {
        self.out.join("inputs").join(format!("{split}.act"))
    }

    pub fn reducer_path(&self, layer: usize) -> PathBuf {
        self.out
            .join("reducers")
            .join(format!("reducer_layer{layer}.fzr"))
    }

    pub fn cache_path(&self, layer: usize) -> PathBuf {
        self.out
            .join("caches")
            .join(format!("cache_layer{layer}.fzc"))
    }

    pub fn thresholds_path(&self) -> PathBuf {
        self.out.join("thresholds.json")
    }

    pub fn records_path(&self, mode: EvalMode) -> PathBuf {
        let mode = match mode {
            EvalMode::Engine => "engine",
            EvalMode::Oracle => "oracle",
        };
        self.out
            .join("runs")
            .join(format!("{}_{mode}.jsonl", self.cfg.eval_split))
    }

    pub fn purity_path(&self, layer: usize) -> PathBuf {
        self.out.join(format!("purity_layer{layer}.csv"))
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.out.join("manifests").join(format!("{stage}.json"))
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn load_trace(&self) -> Result<ActivationTrace> {
        let dir = self.trace_dir();
        require(&dir.join(MANIFEST_FILE), Stage::SynthTraces)?;
        read_trace(&dir)
    }

    pub fn load_reducers(&self, trace: &ActivationTrace) -> Result<Vec<Reducer>> {
        (0..trace.num_layers())
            .map(|l| {
                let p = self.reducer_path(l);
                require(&p, Stage::TrainReduce)?;
                Reducer::load(&p, l)
            })
            .collect()
    }

    pub fn load_caches(&self, trace: &ActivationTrace) -> Result<Vec<LayerCache>> {
        (0..trace.num_layers())
            .map(|l| {
                let p = self.cache_path(l);
                require(&p, Stage::BuildCache)?;
                LayerCache::load(&p, l)
            })
            .collect()
    }

    pub fn load_thresholds(&self) -> Result<ThresholdTable> {
        let p = self.thresholds_path();
        require(&p, Stage::Thresholds)?;
        ThresholdTable::load(&p)
    }

    fn synth_traces(&self) -> Result<StageOutput> {
        let c = &self.cfg;
        let data = generate_synthetic(&SynthConfig {
            num_classes: c.num_classes,
            input_dim: c.input_dim,
            counts: SplitCounts {
                train: c.train_count,
                val: c.val_count,
                test: c.test_count,
            },
            separation: c.separation,
            seed: c.seed,
        })?;
        let sgd = SgdConfig {
            epochs: c.model_epochs,
            learning_rate: c.model_learning_rate as f32,
            batch_size: c.model_batch_size,
        };
        let (model, report) = train_reference_model(&data, &c.hidden_widths, sgd, c.seed)?;
        let trace = forward_collect(&model, &data)?;

        let dir = self.trace_dir();
        write_trace(&trace, &dir)?;
        let mut artifacts = list_files(&dir)?;
        model.save(&self.model_path())?;
        artifacts.push(self.model_path());
        mkdir(&self.out.join("inputs"))?;
        for (&split, d) in &data.splits {
            write_activations(&self.inputs_path(split), &d.inputs)?;
            artifacts.push(self.inputs_path(split));
        }
        let test = data.split(Split::Test)?;
        let test_accuracy =
            (!test.labels.is_empty()).then(|| model.net.accuracy(&test.inputs, &test.labels));
        let summary = ModelReport {
            train_accuracy: report.train_accuracy,
            final_loss: report.final_loss,
            test_accuracy,
        };
        let path = self.file("model_report.json");
        save_json(&path, &summary)?;
        artifacts.push(path);

        let mut notes = vec![format!(
            "reference model: {} hidden layers, train accuracy {:.4}",
            model.hidden_layers(),
            report.train_accuracy
        )];
        if let Some(a) = test_accuracy {
            notes.push(format!("test accuracy vs true labels {a:.4}"));
        }
        self.finish(Stage::SynthTraces, artifacts, Vec::new(), notes)
    }

    /// Train accuracy of the reference model written by `synth-traces`.
    pub fn model_train_accuracy(&self) -> Result<f64> {
        let path = self.file("model_report.json");
        require(&path, Stage::SynthTraces)?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let r: ModelReport =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        Ok(r.train_accuracy)
    }

    fn train_reduce(&self) -> Result<StageOutput> {
        let trace = self.load_trace()?;
        let c = &self.cfg;
        let trained: Vec<(Reducer, Option<f64>)> = trace
            .layers
            .par_iter()
            .map(|meta| {
                if !c.reduce {
                    return Ok((Reducer::identity(meta.index, meta.dim), None));
                }
                let seed = c.seed.wrapping_add(meta.index as u64);
                let (r, report) =
                    train_reducer(&trace, meta.index, &c.reducer_config(meta.dim), seed)?;
                Ok((r, Some(report.train_accuracy)))
            })
            .collect::<Result<_>>()?;

        mkdir(&self.out.join("reducers"))?;
        let mut artifacts = Vec::new();
        let mut notes = Vec::new();
        for (r, acc) in &trained {
            let p = self.reducer_path(r.layer_index);
            r.save(&p)?;
            artifacts.push(p);
            notes.push(match acc {
                Some(a) => format!(
                    "layer {}: {} -> {} dims, head accuracy {a:.4}",
                    r.layer_index, r.input_dim, r.embed_dim
                ),
                None => format!("layer {}: identity ({} dims)", r.layer_index, r.input_dim),
            });
        }
        self.finish(Stage::TrainReduce, artifacts, Vec::new(), notes)
    }

    fn build_cache(&self) -> Result<StageOutput> {
        let trace = self.load_trace()?;
        let reducers = self.load_reducers(&trace)?;
        let caches = match self.cfg.cache_mode {
            CacheMode::Knn => construct_knn_cache(&trace, &reducers, self.cfg.k)?,
            CacheMode::Kmeans => {
                construct_centroid_cache(&trace, &reducers, self.cfg.clusters, self.cfg.seed)?
            }
        };
        mkdir(&self.out.join("caches"))?;
        let mut artifacts = Vec::new();
        let mut notes = Vec::new();
        for c in &caches {
            let p = self.cache_path(c.layer_index);
            c.save(&p)?;
            artifacts.push(p);
            notes.push(format!(
                "layer {}: {} {} entries, {} bytes",
                c.layer_index,
                c.len(),
                c.mode().as_str(),
                c.memory_bytes()
            ));
        }
        self.finish(Stage::BuildCache, artifacts, Vec::new(), notes)
    }

    fn thresholds(&self) -> Result<StageOutput> {
        let trace = self.load_trace()?;
        let reducers = self.load_reducers(&trace)?;
        let caches = self.load_caches(&trace)?;
        let mut table =
            compute_thresholds(&trace.layers, &caches, &reducers, trace.split(Split::Val)?)?;
        if !self.cfg.layers.is_empty() {
            table.enable_only(&self.cfg.layers)?;
        }
        let p = self.thresholds_path();
        table.save(&p)?;
        let notes = table
            .layers
            .iter()
            .map(|t| {
                format!(
                    "layer {}: threshold {}{}",
                    t.layer,
                    t.threshold,
                    if t.enabled { "" } else { " (disabled)" }
                )
            })
            .collect();
        self.finish(Stage::Thresholds, vec![p], Vec::new(), notes)
    }

    fn infer(&self) -> Result<StageOutput> {
        let trace = self.load_trace()?;
        let reducers = self.load_reducers(&trace)?;
        let caches = self.load_caches(&trace)?;
        let table = self.load_thresholds()?;
        let stack = LayerStack {
            caches: &caches,
            reducers: &reducers,
        };
        let split = trace.split(self.cfg.eval_split)?;
        let run = batch_evaluate(EvalInput::Replay(split), stack, &table, EvalMode::Engine)?;
        let records = self.records_path(EvalMode::Engine);
        mkdir(records.parent().unwrap())?;
        write_records(&records, &run.records)?;

        // Wall-clock costs come from a live run when the reference model and
        // raw inputs are available; a replay run only times lookups.
        let timed = match self.live_inputs(&trace)? {
            Some((model, inputs)) => batch_evaluate(
                EvalInput::Live {
                    model: &model,
                    inputs: &inputs,
                },
                stack,
                &table,
                EvalMode::Engine,
            )?,
            None => run.clone(),
        };
        let timing = self.file("timing.csv");
        let mut timing_files = Vec::new();
        if let Some(report) = timing_report(&timed) {
            metrics::write_timing_csv(&timing, &report)?;
            timing_files.push(timing);
        }

        let mut notes = Vec::new();
        if !run.records.is_empty() {
            let acc = agreement_accuracy(&run.records)?;
            notes.push(format!(
                "{}: {} examples, {:.2}% frozen, frozen-only agreement {}",
                self.cfg.eval_split,
                run.records.len(),
                100.0 * acc.frozen_fraction,
                fmt_opt(acc.frozen_only)
            ));
        }
        self.finish(Stage::Infer, vec![records], timing_files, notes)
    }

    /// The reference model and raw inputs of the eval split, if both exist
    /// and match the trace.
    fn live_inputs(&self, trace: &ActivationTrace) -> Result<Option<(RefModel, crate::Matrix)>> {
        let mp = self.model_path();
        let ip = self.inputs_path(self.cfg.eval_split);
        if !mp.exists() || !ip.exists() {
            return Ok(None);
        }
        let model = RefModel::load(&mp)?;
        let inputs = read_activations(&ip)?;
        let widths: Vec<usize> = trace.layers.iter().map(|l| l.dim).collect();
        let matches = model.hidden_widths() == widths
            && inputs.cols() == model.input_dim()
            && inputs.rows() == trace.split(self.cfg.eval_split)?.len();
        Ok(matches.then_some((model, inputs)))
    }

    fn oracle(&self) -> Result<StageOutput> {
        let trace = self.load_trace()?;
        let reducers = self.load_reducers(&trace)?;
        let caches = self.load_caches(&trace)?;
        let stack = LayerStack {
            caches: &caches,
            reducers: &reducers,
        };
        let split = trace.split(self.cfg.eval_split)?;
        let table = ThresholdTable::zeros(trace.num_layers());
        let run = batch_evaluate(EvalInput::Replay(split), stack, &table, EvalMode::Oracle)?;
        let p = self.records_path(EvalMode::Oracle);
        mkdir(p.parent().unwrap())?;
        write_records(&p, &run.records)?;
        let frozen = run
            .records
            .iter()
            .filter(|r| r.frozen_layer.is_some())
            .count();
        let notes = vec![format!(
            "{}: oracle freezes {frozen} of {} examples",
            self.cfg.eval_split,
            run.records.len()
        )];
        self.finish(Stage::Oracle, vec![p], Vec::new(), notes)
    }

    fn sweep(&self) -> Result<StageOutput> {
        let trace = self.load_trace()?;
        let reducers = self.load_reducers(&trace)?;
        let caches = self.load_caches(&trace)?;
        let base = self.load_thresholds()?;
        let stack = LayerStack {
            caches: &caches,
            reducers: &reducers,
        };
        let split = trace.split(self.cfg.eval_split)?;
        let rows = metrics::sweep(
            EvalInput::Replay(split),
            stack,
            &base,
            &self.cfg.lambda_grid,
        )?;
        let p = self.file("sweep.csv");
        metrics::write_sweep_csv(&p, &rows)?;
        let notes = rows
            .iter()
            .map(|r| {
                format!(
                    "lambda {}: {:.2}% frozen, agreement {}",
                    r.lambda,
                    r.frozen_pct,
                    fmt_opt(r.frozen_acc)
                )
            })
            .collect();
        self.finish(Stage::Sweep, vec![p], Vec::new(), notes)
    }

    fn purity(&self) -> Result<StageOutput> {
        let trace = self.load_trace()?;
        let reducers = if self.cfg.purity_raw {
            None
        } else {
            Some(self.load_reducers(&trace)?)
        };
        let layers: Vec<usize> = if self.cfg.layers.is_empty() {
            (0..trace.num_layers()).collect()
        } else {
            self.cfg.layers.clone()
        };
        let report = purity_report(
            &trace,
            &layers,
            &PurityConfig {
                split: Split::Train,
                clusters: self.cfg.purity_clusters,
                seed: self.cfg.seed,
                reducers: reducers.as_deref(),
                labels: self.cfg.purity_labels,
            },
        )?;
        let mut artifacts = Vec::new();
        let mut notes = Vec::new();
        for lp in &report {
            let p = self.purity_path(lp.layer);
            metrics::write_purity_csv(&p, lp)?;
            artifacts.push(p);
            notes.push(format!(
                "layer {}: mean majority fraction {:.4} over {} clusters",
                lp.layer,
                lp.mean_fraction,
                lp.clusters.len()
            ));
        }
        self.finish(Stage::Purity, artifacts, Vec::new(), notes)
    }

    fn memory(&self) -> Result<StageOutput> {
        let trace = self.load_trace()?;
        let caches = self.load_caches(&trace)?;
        let report = memory_bytes(&caches);
        let p = self.file("memory.csv");
        metrics::write_memory_csv(&p, &report)?;
        let notes = vec![format!("total cache memory {} bytes", report.total)];
        self.finish(Stage::Memory, vec![p], Vec::new(), notes)
    }

    /// Needs `infer` output; recomputes oracle, sweep, purity and memory
    /// before writing the CDF table and a plain-text summary.
    fn report(&self) -> Result<StageOutput> {
        let engine_path = self.records_path(EvalMode::Engine);
        require(&engine_path, Stage::Infer)?;
        let trace = self.load_trace()?;
        let n = trace.num_layers();
        let engine = read_records(&engine_path)?;

        self.oracle()?;
        let oracle = read_records(&self.records_path(EvalMode::Oracle))?;
        let sweep = self.sweep()?;
        let purity = self.purity()?;
        let memory = self.memory()?;

        let mut artifacts = Vec::new();
        let mut s = String::new();
        writeln!(
            s,
            "dataset {} with {} classes and {} traced layers",
            trace.dataset_name, trace.num_classes, n
        )
        .unwrap();
        writeln!(s, "cache mode {}", self.cfg.cache_mode.as_str()).unwrap();
        if !engine.is_empty() {
            let e_cdf = frozen_cdf(&engine, n)?;
            let o_cdf = frozen_cdf(&oracle, n)?;
            let p = self.file("cdf.csv");
            metrics::write_cdf_csv(&p, &e_cdf, &o_cdf)?;
            artifacts.push(p);
            let acc = agreement_accuracy(&engine)?;
            writeln!(
                s,
                "{} split: {} examples",
                self.cfg.eval_split,
                engine.len()
            )
            .unwrap();
            writeln!(s, "frozen {:.2}%", 100.0 * acc.frozen_fraction).unwrap();
            writeln!(s, "frozen-only agreement {}", fmt_opt(acc.frozen_only)).unwrap();
            writeln!(s, "overall agreement {:.4}", acc.overall).unwrap();
            writeln!(s, "layer engine_cdf oracle_cdf").unwrap();
            for (l, (e, o)) in e_cdf.iter().zip(&o_cdf).enumerate() {
                writeln!(s, "{l} {e:.4} {o:.4}").unwrap();
            }
        }
        for section in [&sweep, &purity, &memory] {
            writeln!(s, "{}:", section.stage).unwrap();
            for note in &section.notes {
                writeln!(s, "  {note}").unwrap();
            }
        }
        let p = self.file("summary.txt");
        binio::write_atomic(&p, s.as_bytes())?;
        artifacts.push(p);
        let notes = s.lines().map(str::to_string).collect();
        self.finish(Stage::Report, artifacts, Vec::new(), notes)
    }

    fn finish(
        &self,
        stage: Stage,
        artifacts: Vec<PathBuf>,
        timing: Vec<PathBuf>,
        notes: Vec<String>,
    ) -> Result<StageOutput> {
        let hashes = artifacts
            .iter()
            .map(|p| {
                Ok(ArtifactHash {
                    path: self.display_path(p),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            stage: stage.name(),
            seed: self.cfg.seed,
            config: &self.cfg,
            artifacts: hashes,
            timing_artifacts: timing.iter().map(|p| self.display_path(p)).collect(),
        };
        let p = self.manifest_path(stage);
        mkdir(p.parent().unwrap())?;
        save_json(&p, &manifest)?;
        let mut all = artifacts;
        all.extend(timing);
        Ok(StageOutput {
            stage,
            artifacts: all,
            notes,
        })
    }

    /// Paths inside the output directory are recorded relative to it so
    /// manifests stay comparable across locations.
    fn display_path(&self, p: &Path) -> String {
        p.strip_prefix(&self.out)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }
}

fn require(path: &Path, stage: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage: stage.name(),
        })
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_file() {
            files.push(entry.path());
        }
    }
    files.sort();
    Ok(files)
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value).expect("value serializes");
    json.push('\n');
    binio::write_atomic(path, json.as_bytes())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = binio::read_file(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}
