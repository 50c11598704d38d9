//! Online early-exit loop.
//!
//! Layers are visited in order. At every enabled layer the activation is
//! reduced and looked up; if the lookup confidence is strictly greater than
//! the layer's threshold, inference stops there and the cached label is
//! returned. Otherwise the model's own output-layer prediction is used.

use std::borrow::Cow;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::cache::{reduced_lookup, LayerCache};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::reduce::Reducer;
use crate::threshold::ThresholdTable;
use crate::trace::{RefModel, SplitData};

/// Supplies one example's activations layer by layer.
pub trait LayerSource {
    fn num_layers(&self) -> usize;

    /// Activation of the next layer; the first call yields layer 0.
    fn next_layer(&mut self) -> Result<Cow<'_, [f32]>>;

    /// The model's output-layer prediction, computing any remaining layers.
    fn model_label(&mut self) -> Result<u32>;

    /// Nanoseconds spent computing each layer so far (empty when the
    /// activations were precomputed).
    fn forward_ns(&self) -> &[u64] {
        &[]
    }
}

/// Replays precomputed activations from a trace split.
pub struct ReplaySource<'a> {
    split: &'a SplitData,
    example: usize,
    next: usize,
}

impl<'a> ReplaySource<'a> {
    pub fn new(split: &'a SplitData, example: usize) -> Result<Self> {
        if example >= split.len() {
            return Err(Error::arg(format!(
                "example {example} out of range for split of {}",
                split.len()
            )));
        }
        Ok(Self {
            split,
            example,
            next: 0,
        })
    }
}

impl LayerSource for ReplaySource<'_> {
    fn num_layers(&self) -> usize {
        self.split.activations.len()
    }

    fn next_layer(&mut self) -> Result<Cow<'_, [f32]>> {
        let layer = self.next;
        let m = self
            .split
            .activations
            .get(layer)
            .ok_or_else(|| Error::arg(format!("trace has no layer {layer}")))?;
        self.next += 1;
        Ok(Cow::Borrowed(m.row(self.example)))
    }

    fn model_label(&mut self) -> Result<u32> {
        Ok(self.split.model_labels[self.example])
    }
}

/// Runs the reference model one hidden layer at a time, so layers after a
/// freeze are never computed.
pub struct LiveSource<'a> {
    model: &'a RefModel,
    input: &'a [f32],
    current: Vec<f32>,
    computed: usize,
    forward_ns: Vec<u64>,
}

impl<'a> LiveSource<'a> {
    pub fn new(model: &'a RefModel, input: &'a [f32]) -> Result<Self> {
        if input.len() != model.input_dim() {
            return Err(Error::arg(format!(
                "input dim {} does not match model input dim {}",
                input.len(),
                model.input_dim()
            )));
        }
        Ok(Self {
            model,
            input,
            current: Vec::new(),
            computed: 0,
            forward_ns: Vec::new(),
        })
    }

    /// Hidden layers evaluated so far.
    pub fn layers_computed(&self) -> usize {
        self.computed
    }

    fn step(&mut self) -> Result<()> {
        let layer = self.computed;
        if layer >= self.model.hidden_layers() {
            return Err(Error::arg(format!("model has no hidden layer {layer}")));
        }
        let start = Instant::now();
        let prev: &[f32] = if layer == 0 {
            self.input
        } else {
            &self.current
        };
        let next = self.model.forward_hidden(layer, prev);
        self.forward_ns.push(start.elapsed().as_nanos() as u64);
        self.current = next;
        self.computed += 1;
        Ok(())
    }
}

impl LayerSource for LiveSource<'_> {
    fn num_layers(&self) -> usize {
        self.model.hidden_layers()
    }

    fn next_layer(&mut self) -> Result<Cow<'_, [f32]>> {
        self.step()?;
        Ok(Cow::Borrowed(&self.current))
    }

    fn model_label(&mut self) -> Result<u32> {
        while self.computed < self.model.hidden_layers() {
            self.step()?;
        }
        Ok(self.model.predict_from_last_hidden(&self.current))
    }

    fn forward_ns(&self) -> &[u64] {
        &self.forward_ns
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub layer: usize,
    /// `None` for disabled layers, which are passed through without lookup.
    pub lookup_label: Option<u32>,
    pub confidence: Option<f64>,
    pub threshold: Option<f64>,
    pub froze: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreezeResult {
    pub frozen_layer: Option<usize>,
    pub label: u32,
    pub confidence: Option<f64>,
    /// One record per visited layer: `0..=frozen_layer`, or every layer.
    pub layer_records: Vec<LayerRecord>,
}

/// Caches and reducers for every layer, indexed by layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerStack<'a> {
    pub caches: &'a [LayerCache],
    pub reducers: &'a [Reducer],
}

impl<'a> LayerStack<'a> {
    fn get(&self, layer: usize) -> Result<(&'a Reducer, &'a LayerCache)> {
        let cache = self
            .caches
            .get(layer)
            .filter(|c| c.layer_index == layer)
            .ok_or_else(|| Error::Config(format!("no cache for layer {layer}")))?;
        let reducer = self
            .reducers
            .get(layer)
            .filter(|r| r.layer_index == layer)
            .ok_or_else(|| Error::Config(format!("no reducer for layer {layer}")))?;
        Ok((reducer, cache))
    }
}

fn freeze_timed(
    source: &mut dyn LayerSource,
    stack: LayerStack<'_>,
    table: &ThresholdTable,
    lookup_ns: &mut Vec<(usize, u64)>,
) -> Result<FreezeResult> {
    let n = source.num_layers();
    if table.num_layers() < n {
        return Err(Error::Config(format!(
            "threshold table covers {} layers, example has {n}",
            table.num_layers()
        )));
    }
    let mut records = Vec::with_capacity(n);
    for layer in 0..n {
        let activation = source.next_layer()?;
        let Some(threshold) = table.effective(layer) else {
            records.push(LayerRecord {
                layer,
                lookup_label: None,
                confidence: None,
                threshold: None,
                froze: false,
            });
            continue;
        };
        let (reducer, cache) = stack.get(layer)?;
        let start = Instant::now();
        let hit = reduced_lookup(reducer, cache, &activation)?;
        lookup_ns.push((layer, start.elapsed().as_nanos() as u64));
        let froze = hit.confidence > threshold;
        records.push(LayerRecord {
            layer,
            lookup_label: Some(hit.label),
            confidence: Some(hit.confidence),
            threshold: Some(threshold),
            froze,
        });
        if froze {
            return Ok(FreezeResult {
                frozen_layer: Some(layer),
                label: hit.label,
                confidence: Some(hit.confidence),
                layer_records: records,
            });
        }
    }
    Ok(FreezeResult {
        frozen_layer: None,
        label: source.model_label()?,
        confidence: None,
        layer_records: records,
    })
}

/// Runs one example through the early-exit loop.
pub fn freeze_infer(
    source: &mut dyn LayerSource,
    stack: LayerStack<'_>,
    table: &ThresholdTable,
) -> Result<FreezeResult> {
    freeze_timed(source, stack, table, &mut Vec::new())
}

/// Index of the first layer whose lookup label equals the model label.
pub fn first_agreeing_layer(lookup_labels: &[u32], model_label: u32) -> Option<usize> {
    lookup_labels.iter().position(|&l| l == model_label)
}

/// Earliest layer whose lookup agrees with the model's final label,
/// regardless of confidence. This is the upper bound a perfect threshold
/// scheme could reach.
pub fn oracle_freeze(
    source: &mut dyn LayerSource,
    stack: LayerStack<'_>,
    model_label: u32,
) -> Result<Option<usize>> {
    for layer in 0..source.num_layers() {
        let activation = source.next_layer()?;
        let (reducer, cache) = stack.get(layer)?;
        if reduced_lookup(reducer, cache, &activation)?.label == model_label {
            return Ok(Some(layer));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Engine,
    Oracle,
}

/// Where evaluation examples come from.
#[derive(Clone, Copy)]
pub enum EvalInput<'a> {
    Replay(&'a SplitData),
    Live {
        model: &'a RefModel,
        inputs: &'a Matrix,
    },
}

impl EvalInput<'_> {
    fn len(&self) -> usize {
        match self {
            EvalInput::Replay(s) => s.len(),
            EvalInput::Live { inputs, .. } => inputs.rows(),
        }
    }

    fn num_layers(&self) -> usize {
        match self {
            EvalInput::Replay(s) => s.activations.len(),
            EvalInput::Live { model, .. } => model.hidden_layers(),
        }
    }
}

/// One line of the evaluation record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: usize,
    pub frozen_layer: Option<usize>,
    pub label: u32,
    pub model_label: u32,
    pub confidence: Option<f64>,
}

impl ExampleRecord {
    pub fn agrees(&self) -> bool {
        self.label == self.model_label
    }
}

/// Summed wall-clock cost per layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerTiming {
    pub total_ns: u64,
    pub count: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timing {
    /// Reducer application plus cache lookup.
    pub lookup: Vec<LayerTiming>,
    /// Reference forward computation; empty for replayed traces.
    pub forward: Vec<LayerTiming>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRun {
    pub mode: EvalMode,
    pub num_layers: usize,
    pub records: Vec<ExampleRecord>,
    pub timing: Timing,
}

struct Outcome {
    record: ExampleRecord,
    lookup_ns: Vec<(usize, u64)>,
    forward_ns: Vec<u64>,
}

fn evaluate_one(
    input: EvalInput<'_>,
    id: usize,
    stack: LayerStack<'_>,
    table: &ThresholdTable,
    mode: EvalMode,
) -> Result<Outcome> {
    // The model label is taken from a separate, untimed pass so a live run
    // still skips work after a freeze.
    let (mut source, model_label): (Box<dyn LayerSource>, u32) = match input {
        EvalInput::Replay(split) => {
            let s = ReplaySource::new(split, id)?;
            (Box::new(s), split.model_labels[id])
        }
        EvalInput::Live { model, inputs } => {
            let x = inputs.row(id);
            (Box::new(LiveSource::new(model, x)?), model.predict(x))
        }
    };
    let mut lookup_ns = Vec::new();
    let record = match mode {
        EvalMode::Engine => {
            let r = freeze_timed(source.as_mut(), stack, table, &mut lookup_ns)?;
            ExampleRecord {
                id,
                frozen_layer: r.frozen_layer,
                label: r.label,
                model_label,
                confidence: r.confidence,
            }
        }
        EvalMode::Oracle => {
            let layer = oracle_freeze(source.as_mut(), stack, model_label)?;
            ExampleRecord {
                id,
                frozen_layer: layer,
                label: model_label,
                model_label,
                confidence: None,
            }
        }
    };
    Ok(Outcome {
        record,
        lookup_ns,
        forward_ns: source.forward_ns().to_vec(),
    })
}

/// Evaluates every example independently (in parallel) and gathers records
/// and timings in example order.
pub fn batch_evaluate(
    input: EvalInput<'_>,
    stack: LayerStack<'_>,
    table: &ThresholdTable,
    mode: EvalMode,
) -> Result<EvaluationRun> {
    let num_layers = input.num_layers();
    let outcomes = (0..input.len())
        .into_par_iter()
        .map(|id| evaluate_one(input, id, stack, table, mode))
        .collect::<Result<Vec<_>>>()?;

    let mut timing = Timing {
        lookup: vec![LayerTiming::default(); num_layers],
        forward: Vec::new(),
    };
    if matches!(input, EvalInput::Live { .. }) {
        timing.forward = vec![LayerTiming::default(); num_layers];
    }
    let mut records = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        for (layer, ns) in o.lookup_ns {
            timing.lookup[layer].total_ns += ns;
            timing.lookup[layer].count += 1;
        }
        for (layer, ns) in o.forward_ns.into_iter().enumerate() {
            timing.forward[layer].total_ns += ns;
            timing.forward[layer].count += 1;
        }
        records.push(o.record);
    }
    Ok(EvaluationRun {
        mode,
        num_layers,
        records,
        timing,
    })
}

/// Writes one JSON object per line.
pub fn write_records(path: &Path, records: &[ExampleRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    binio::write_atomic(path, out.as_bytes())
}

pub fn read_records(path: &Path) -> Result<Vec<ExampleRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ExampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        records.push(r);
    }
    Ok(records)
}
