//! Weighted average depth of graph layers.
//!
//! The depth of a layer counts the weight layers (convolutions, transposed
//! convolutions and head convolutions) on the way from the data layer,
//! averaged over merge inputs:
//!
//! ```text
//! D(data) = 0
//! D(L)    = Σᵢ wᵢ · (D(inputᵢ) + δ(L))     δ(L) = 1 for weight layers, else 0
//! ```
//!
//! with `wᵢ = 1` for single-input layers, the layer's declared merge weights
//! for elementwise merges (0.5/0.5), and `1/k` for a `k`-way concatenation.
//! A convolution reading the data layer directly therefore has depth 1.
//! Batch norm, relu, pooling and the merge nodes themselves add nothing.
//!
//! Everything is evaluated in exact rational arithmetic.

use std::collections::HashMap;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::DepthError;
use crate::graph::{LayerSpec, NetGraph};

pub type Depth = Ratio<i64>;

/// Input weights `wᵢ` of a layer, summing to 1.
pub fn input_weights(layer: &LayerSpec) -> Vec<Depth> {
    let k = layer.inputs.len() as i64;
    match &layer.params.weights {
        Some(ws) if ws.len() == layer.inputs.len() => {
            ws.iter().map(|&w| Ratio::approximate_float(w).unwrap_or_else(|| Ratio::new(1, k))).collect()
        }
        _ => vec![Ratio::new(1, k.max(1)); layer.inputs.len()],
    }
}

/// `δ(L)`: 1 for weight layers.
pub fn increment(layer: &LayerSpec) -> Depth {
    if layer.kind.is_weight_layer() {
        Ratio::from_integer(1)
    } else {
        Ratio::zero()
    }
}

/// Depth of every layer, evaluated once each in topological order.
pub fn all_depths(graph: &NetGraph) -> HashMap<String, Depth> {
    let mut memo: HashMap<String, Depth> = HashMap::with_capacity(graph.layers().len());
    for layer in graph.topo_order() {
        let delta = increment(layer);
        let d = layer
            .inputs
            .iter()
            .zip(input_weights(layer))
            .fold(Ratio::zero(), |acc, (input, w)| acc + w * (memo[input] + delta));
        memo.insert(layer.name.clone(), d);
    }
    memo
}

pub fn weighted_average_depth(graph: &NetGraph, layer: &str) -> Result<Depth, DepthError> {
    if !graph.contains(layer) {
        return Err(DepthError::UnknownLayer(layer.to_string()));
    }
    Ok(all_depths(graph)[layer])
}

/// `100 · σ / μ` with the population standard deviation.
pub fn coefficient_of_variation(depths: &[Depth]) -> Result<f64, DepthError> {
    if depths.is_empty() {
        return Err(DepthError::DegenerateSample);
    }
    let n = Ratio::from_integer(depths.len() as i64);
    let mean = depths.iter().fold(Ratio::zero(), |a: Depth, &d| a + d) / n;
    if mean.is_zero() {
        return Err(DepthError::DegenerateSample);
    }
    let var = depths.iter().fold(Ratio::zero(), |a: Depth, &d| a + (d - mean) * (d - mean)) / n;
    let var = var.to_f64().ok_or(DepthError::DegenerateSample)?;
    let mean = mean.to_f64().ok_or(DepthError::DegenerateSample)?;
    Ok(100.0 * var.sqrt() / mean)
}

fn serialize_ratio<S: Serializer>(r: &Depth, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&r.to_string())
}

fn deserialize_ratio<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Depth, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

fn serialize_percent<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64((v * 100.0).round() / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDepth {
    pub name: String,
    /// Spatial size of the source feature map.
    pub scale: usize,
    #[serde(rename = "depth_rational", serialize_with = "serialize_ratio", deserialize_with = "deserialize_ratio")]
    pub exact: Depth,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub sources: Vec<SourceDepth>,
    /// Serialized rounded to two decimals.
    #[serde(serialize_with = "serialize_percent")]
    pub cv_percent: f64,
}

impl DepthReport {
    pub fn exact_depths(&self) -> Vec<Depth> {
        self.sources.iter().map(|s| s.exact).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Depth of each prediction source (the feature layer, not its head or any
/// extra prediction convolution) plus their coefficient of variation.
pub fn analyze(graph: &NetGraph) -> Result<DepthReport, DepthError> {
    if graph.prediction_sources().is_empty() {
        return Err(DepthError::NoSources);
    }
    let depths = all_depths(graph);
    let sources: Vec<SourceDepth> = graph
        .prediction_sources()
        .iter()
        .map(|name| {
            let exact = depths[name];
            SourceDepth {
                name: name.clone(),
                scale: graph.shape(name).map_or(0, |s| s.height),
                exact,
                depth: exact.to_f64().unwrap_or(f64::NAN),
            }
        })
        .collect();
    let cv_percent = coefficient_of_variation(&sources.iter().map(|s| s.exact).collect::<Vec<_>>())?;
    Ok(DepthReport { sources, cv_percent })
}
