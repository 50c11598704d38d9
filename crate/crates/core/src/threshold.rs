//! Per-layer freeze thresholds calibrated on the validation split.
//!
//! A layer's threshold is the largest lookup confidence that produced a label
//! different from the model's own prediction on validation data (0.0 if no
//! lookup was wrong). Freezing requires confidence strictly greater than the
//! effective threshold, so replaying the validation split never freezes a
//! wrong label.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::binio;
use crate::cache::{reduced_lookup, reducer_for, LayerCache};
use crate::error::{Error, Result};
use crate::reduce::Reducer;
use crate::trace::{LayerMeta, SplitData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerThreshold {
    pub layer: usize,
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub threshold: f64,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    /// Global multiplier applied to every threshold.
    pub scale: f64,
    pub layers: Vec<LayerThreshold>,
}

/// One validation lookup at one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub predicted: u32,
    pub model_label: u32,
    pub confidence: f64,
}

impl ThresholdTable {
    /// All layers enabled with threshold 0.0.
    pub fn zeros(num_layers: usize) -> Self {
        Self {
            scale: 1.0,
            layers: (0..num_layers)
                .map(|layer| LayerThreshold {
                    layer,
                    threshold: 0.0,
                    enabled: true,
                })
                .collect(),
        }
    }

    /// Every layer set to `+inf`: nothing ever freezes.
    pub fn never(num_layers: usize) -> Self {
        let mut t = Self::zeros(num_layers);
        t.layers
            .iter_mut()
            .for_each(|l| l.threshold = f64::INFINITY);
        t
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Threshold to beat at `layer`, or `None` when the layer is disabled or
    /// absent from the table.
    pub fn effective(&self, layer: usize) -> Option<f64> {
        let t = self.layers.get(layer).filter(|t| t.enabled)?;
        Some(if t.threshold.is_infinite() {
            t.threshold
        } else {
            t.threshold * self.scale
        })
    }

    /// Enables exactly the listed layers.
    pub fn enable_only(&mut self, layers: &[usize]) -> Result<()> {
        if let Some(&bad) = layers.iter().find(|&&l| l >= self.layers.len()) {
            return Err(Error::arg(format!(
                "cannot enable layer {bad}: table has {} layers",
                self.layers.len()
            )));
        }
        for t in &mut self.layers {
            t.enabled = layers.contains(&t.layer);
        }
        Ok(())
    }

    /// Raises the threshold of `layer` to `confidence` if the lookup was wrong.
    pub fn observe(&mut self, layer: usize, obs: &Observation) {
        if obs.predicted != obs.model_label {
            let t = &mut self.layers[layer].threshold;
            *t = t.max(obs.confidence);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self).expect("table serializes");
        json.push('\n');
        binio::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if !(table.scale >= 0.0 && table.scale.is_finite()) {
            return Err(Error::format(
                path,
                format!("invalid scale {}", table.scale),
            ));
        }
        for (i, t) in table.layers.iter().enumerate() {
            if t.layer != i {
                return Err(Error::format(path, "layers must be listed in order from 0"));
            }
            if t.threshold.is_nan() || t.threshold < 0.0 {
                return Err(Error::format(
                    path,
                    format!("layer {i} threshold {} is negative", t.threshold),
                ));
            }
        }
        Ok(table)
    }
}

/// Applies the max-over-wrong rule to pre-computed lookups, one list per layer.
pub fn thresholds_from_observations(per_layer: &[Vec<Observation>]) -> ThresholdTable {
    let mut table = ThresholdTable::zeros(per_layer.len());
    for (layer, obs) in per_layer.iter().enumerate() {
        for o in obs {
            table.observe(layer, o);
        }
    }
    table
}

/// Looks up every validation item at every layer and records the max
/// confidence among wrong predictions.
pub fn compute_thresholds(
    layers: &[LayerMeta],
    caches: &[LayerCache],
    reducers: &[Reducer],
    validation: &SplitData,
) -> Result<ThresholdTable> {
    if validation.is_empty() {
        return Err(Error::arg("validation split is empty"));
    }
    let mut per_layer = Vec::with_capacity(layers.len());
    for meta in layers {
        let cache = caches
            .iter()
            .find(|c| c.layer_index == meta.index)
            .ok_or_else(|| Error::Config(format!("no cache for layer {}", meta.index)))?;
        let reducer = reducer_for(reducers, meta.index, meta.dim)?;
        let obs = (0..validation.len())
            .into_par_iter()
            .map(|i| {
                let r = reduced_lookup(reducer, cache, validation.activation(meta.index, i))?;
                Ok(Observation {
                    predicted: r.label,
                    model_label: validation.model_labels[i],
                    confidence: r.confidence,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        per_layer.push(obs);
    }
    Ok(thresholds_from_observations(&per_layer))
}

/// Multiplies every threshold by `lambda` (composing with any existing scale).
pub fn scale_thresholds(table: &ThresholdTable, lambda: f64) -> Result<ThresholdTable> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::arg(format!(
            "threshold scale must be finite and non-negative, got {lambda}"
        )));
    }
    Ok(ThresholdTable {
        scale: table.scale * lambda,
        layers: table.layers.clone(),
    })
}

fn ser_threshold<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_threshold<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Value {
        Num(f64),
        Text(String),
    }
    match Value::deserialize(d)? {
        Value::Num(v) => Ok(v),
        Value::Text(s) if s == "inf" => Ok(f64::INFINITY),
        Value::Text(s) => Err(serde::de::Error::custom(format!(
            "threshold must be a number or \"inf\", got {s:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(predicted: u32, model_label: u32, confidence: f64) -> Observation {
        Observation {
            predicted,
            model_label,
            confidence,
        }
    }

    #[test]
    fn max_over_wrong() {
        let t = thresholds_from_observations(&[vec![
            obs(0, 0, 0.9),
            obs(1, 0, 0.7),
            obs(0, 0, 0.2),
            obs(1, 1, 0.5),
        ]]);
        assert_eq!(t.layers[0].threshold, 0.7);
    }

    #[test]
    fn all_correct_keeps_zero() {
        let t = thresholds_from_observations(&[vec![obs(2, 2, 5.0), obs(1, 1, 3.0)]]);
        assert_eq!(t.layers[0].threshold, 0.0);
    }

    #[test]
    fn all_wrong_takes_max() {
        let t = thresholds_from_observations(&[vec![obs(2, 1, 5.0), obs(0, 1, 3.0)]]);
        assert_eq!(t.layers[0].threshold, 5.0);
    }

    #[test]
    fn scaling() {
        let mut t = thresholds_from_observations(&[vec![obs(1, 0, 2.0)], vec![]]);
        assert_eq!(scale_thresholds(&t, 1.0).unwrap(), t);
        let z = scale_thresholds(&t, 0.0).unwrap();
        assert_eq!(z.effective(0), Some(0.0));
        assert!(scale_thresholds(&t, -1.0).is_err());
        assert!(scale_thresholds(&t, f64::NAN).is_err());
        t.layers[1].threshold = f64::INFINITY;
        assert_eq!(
            scale_thresholds(&t, 0.0).unwrap().effective(1),
            Some(f64::INFINITY)
        );
    }

    #[test]
    fn disabled_layers_have_no_threshold() {
        let mut t = ThresholdTable::zeros(3);
        t.enable_only(&[1]).unwrap();
        assert_eq!(t.effective(0), None);
        assert_eq!(t.effective(1), Some(0.0));
        assert!(t.enable_only(&[3]).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("thresholds.json");
        let mut t = ThresholdTable::zeros(3);
        t.layers[0].threshold = 0.1 + 0.2;
        t.layers[1].threshold = 1.0 / 3.0e-9;
        t.layers[2].threshold = f64::INFINITY;
        t.layers[2].enabled = false;
        t.scale = 0.5;
        t.save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(ThresholdTable::load(&p).unwrap(), t);
    }

    #[test]
    fn rejects_bad_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        fs::write(
            &p,
            r#"{"scale":1.0,"layers":[{"layer":0,"threshold":-1.0,"enabled":true}]}"#,
        )
        .unwrap();
        assert!(matches!(
            ThresholdTable::load(&p),
            Err(Error::Format { .. })
        ));
        fs::write(&p, "not json").unwrap();
        assert!(matches!(
            ThresholdTable::load(&p),
            Err(Error::Format { .. })
        ));
    }

    proptest! {
        #[test]
        fn order_independent(
            v in prop::collection::vec((0u32..3, 0u32..3, 0.0f64..100.0), 0..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let o: Vec<Observation> = v.iter().map(|&(p, m, c)| obs(p, m, c)).collect();
            let mut shuffled = o.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                thresholds_from_observations(&[o]),
                thresholds_from_observations(&[shuffled])
            );
        }

        #[test]
        fn frozen_pairs_shrink_as_scale_grows(
            conf in prop::collection::vec(0.0f64..10.0, 1..30),
            base in 0.0f64..5.0,
            l1 in 0.0f64..4.0,
            dl in 0.0f64..4.0,
        ) {
            let mut t = ThresholdTable::zeros(1);
            t.layers[0].threshold = base;
            let a = scale_thresholds(&t, l1).unwrap().effective(0).unwrap();
            let b = scale_thresholds(&t, l1 + dl).unwrap().effective(0).unwrap();
            for c in conf {
                if c > b {
                    prop_assert!(c > a);
                }
            }
        }
    }
}
