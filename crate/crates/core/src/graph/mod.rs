//! Declarative layer graphs.
//!
//! A [`NetGraph`] is a named DAG of [`LayerSpec`]s plus the ordered list of
//! prediction sources that feed the confidence/localization heads. Graphs are
//! assembled with a [`GraphBuilder`] and sealed by validation; a sealed graph
//! cannot be mutated; [`GraphBuilder::from_graph`] makes an editable copy.

mod builders;
mod exec;

pub use builders::{
    attach_heads, build_essd, build_ssd, make_extension_module, upsample_geometry, Fusion, Profile, ToyConfig,
};
pub use exec::{forward, forward_on_tape, owning_layer, ForwardMode, ForwardPass, ScaleOutput, WeightStore};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::ops::{conv_out_size, deconv_out_size};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Data,
    Conv,
    Deconv,
    Bn,
    Relu,
    Pool,
    Concat,
    EltwiseSum,
    EltwiseProd,
    ConfHead,
    LocHead,
}

impl LayerKind {
    /// Layers that own a learned convolution kernel.
    pub fn is_weight_layer(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Deconv | LayerKind::ConfHead | LayerKind::LocHead)
    }

    pub fn is_eltwise(self) -> bool {
        matches!(self, LayerKind::EltwiseSum | LayerKind::EltwiseProd)
    }

    pub fn is_head(self) -> bool {
        matches!(self, LayerKind::ConfHead | LayerKind::LocHead)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Data => "data",
            LayerKind::Conv => "conv",
            LayerKind::Deconv => "deconv",
            LayerKind::Bn => "bn",
            LayerKind::Relu => "relu",
            LayerKind::Pool => "pool",
            LayerKind::Concat => "concat",
            LayerKind::EltwiseSum => "eltwise_sum",
            LayerKind::EltwiseProd => "eltwise_prod",
            LayerKind::ConfHead => "conf_head",
            LayerKind::LocHead => "loc_head",
        }
    }
}

/// Kind-specific hyperparameters. Unused fields stay `None` and are omitted
/// from the JSON descriptor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<usize>,
    /// Per-input weights of a merge layer (depth bookkeeping only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes_per_cell: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub params: LayerParams,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: &[&str], params: LayerParams) -> Self {
        Self { name: name.into(), kind, inputs: inputs.iter().map(|s| s.to_string()).collect(), params }
    }

    /// `(kernel, stride, pad)` with defaults 1/1/0.
    pub fn window(&self) -> (usize, usize, usize) {
        (self.params.kernel.unwrap_or(1), self.params.stride.unwrap_or(1), self.params.pad.unwrap_or(0))
    }
}

/// Per-layer activation shape `channels × height × width` (batch excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateName(String),
    UnknownInput { layer: String, input: String },
    Arity { layer: String, kind: LayerKind, expected: &'static str, got: usize },
    MergeWeights { layer: String, detail: String },
    DataLayerCount(usize),
    Cycle(Vec<String>),
    MissingParam { layer: String, param: &'static str },
    Shape { layer: String, detail: String },
    UnknownSource(String),
    SourceOrder { earlier: String, later: String },
    Head { layer: String, detail: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateName(n) => write!(f, "layer name `{n}` is used more than once"),
            Violation::UnknownInput { layer, input } => write!(f, "`{layer}` reads unknown layer `{input}`"),
            Violation::Arity { layer, kind, expected, got } => {
                write!(f, "`{layer}` ({}) takes {expected} inputs, has {got}", kind.as_str())
            }
            Violation::MergeWeights { layer, detail } => write!(f, "`{layer}` merge weights: {detail}"),
            Violation::DataLayerCount(n) => write!(f, "graph must have exactly one data layer, found {n}"),
            Violation::Cycle(names) => write!(f, "cycle through layers {}", names.join(", ")),
            Violation::MissingParam { layer, param } => write!(f, "`{layer}` is missing parameter `{param}`"),
            Violation::Shape { layer, detail } => write!(f, "`{layer}`: {detail}"),
            Violation::UnknownSource(n) => write!(f, "prediction source `{n}` does not exist"),
            Violation::SourceOrder { earlier, later } => {
                write!(f, "prediction source `{later}` is not spatially smaller than `{earlier}`")
            }
            Violation::Head { layer, detail } => write!(f, "head `{layer}`: {detail}"),
        }
    }
}

/// JSON form of a graph: `{"layers":[...], "prediction_sources":[...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub layers: Vec<LayerSpec>,
    pub prediction_sources: Vec<String>,
    /// Layer consumed by each source's heads; omitted when identical to the sources.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_inputs: Option<Vec<String>>,
}

/// Sealed, validated layer DAG.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGraph {
    layers: Vec<LayerSpec>,
    index: HashMap<String, usize>,
    prediction_sources: Vec<String>,
    head_inputs: Vec<String>,
    topo_order: Vec<usize>,
    shapes: Vec<Shape>,
}

/// Heads attached to one prediction source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadPair {
    pub source: String,
    pub input: String,
    pub conf: String,
    pub loc: String,
    pub boxes_per_cell: usize,
    pub num_classes: usize,
}

impl NetGraph {
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.index.get(name).map(|&i| &self.layers[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn prediction_sources(&self) -> &[String] {
        &self.prediction_sources
    }

    pub fn head_inputs(&self) -> &[String] {
        &self.head_inputs
    }

    /// Layers in a topological order (ties broken by declaration order).
    pub fn topo_order(&self) -> impl Iterator<Item = &LayerSpec> {
        self.topo_order.iter().map(|&i| &self.layers[i])
    }

    pub fn shape(&self, name: &str) -> Option<Shape> {
        self.index.get(name).map(|&i| self.shapes[i])
    }

    pub fn data_layer(&self) -> &LayerSpec {
        self.layers.iter().find(|l| l.kind == LayerKind::Data).expect("validated graph has a data layer")
    }

    pub fn input_shape(&self) -> Shape {
        self.shape(&self.data_layer().name).expect("data shape")
    }

    /// Names of layers that read `name`.
    pub fn consumers(&self, name: &str) -> Vec<&str> {
        self.layers.iter().filter(|l| l.inputs.iter().any(|i| i == name)).map(|l| l.name.as_str()).collect()
    }

    /// Heads per prediction source, or an empty list when no heads are attached.
    pub fn heads(&self) -> Vec<HeadPair> {
        let mut out = Vec::new();
        for (source, input) in self.prediction_sources.iter().zip(&self.head_inputs) {
            let find = |kind| self.layers.iter().find(|l| l.kind == kind && l.inputs.first() == Some(input));
            if let (Some(conf), Some(loc)) = (find(LayerKind::ConfHead), find(LayerKind::LocHead)) {
                out.push(HeadPair {
                    source: source.clone(),
                    input: input.clone(),
                    conf: conf.name.clone(),
                    loc: loc.name.clone(),
                    boxes_per_cell: conf.params.boxes_per_cell.unwrap_or(1),
                    num_classes: conf.params.num_classes.unwrap_or(1),
                });
            }
        }
        out
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.heads().first().map(|h| h.num_classes)
    }

    pub fn to_descriptor(&self) -> Descriptor {
        Descriptor {
            layers: self.layers.clone(),
            prediction_sources: self.prediction_sources.clone(),
            head_inputs: (self.head_inputs != self.prediction_sources).then(|| self.head_inputs.clone()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_descriptor()).expect("descriptor serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let d: Descriptor = serde_json::from_str(text)?;
        Self::from_descriptor(d)
    }

    pub fn from_descriptor(d: Descriptor) -> Result<Self, GraphError> {
        let mut b = GraphBuilder::new();
        b.layers = d.layers;
        b.head_inputs = d.head_inputs.unwrap_or_else(|| d.prediction_sources.clone());
        b.prediction_sources = d.prediction_sources;
        b.seal()
    }
}

/// Returns every violation in `d`, or `Ok(())` for a well-formed graph.
pub fn validate(d: &Descriptor) -> Result<(), Vec<Violation>> {
    let head_inputs = d.head_inputs.clone().unwrap_or_else(|| d.prediction_sources.clone());
    let analysis = analyze_layers(&d.layers, &d.prediction_sources, &head_inputs);
    if analysis.violations.is_empty() {
        Ok(())
    } else {
        Err(analysis.violations)
    }
}

struct Analysis {
    violations: Vec<Violation>,
    topo: Vec<usize>,
    shapes: Vec<Option<Shape>>,
}

fn analyze_layers(layers: &[LayerSpec], sources: &[String], head_inputs: &[String]) -> Analysis {
    let mut violations = Vec::new();
    let mut index = HashMap::new();
    for (i, l) in layers.iter().enumerate() {
        if index.insert(l.name.clone(), i).is_some() {
            violations.push(Violation::DuplicateName(l.name.clone()));
        }
    }

    let data_count = layers.iter().filter(|l| l.kind == LayerKind::Data).count();
    if data_count != 1 {
        violations.push(Violation::DataLayerCount(data_count));
    }

    let mut bad_arity = vec![false; layers.len()];
    for (i, l) in layers.iter().enumerate() {
        let n = l.inputs.len();
        let expected = match l.kind {
            LayerKind::Data => (n == 0).then_some(()).ok_or("0"),
            LayerKind::EltwiseSum | LayerKind::EltwiseProd => (n == 2).then_some(()).ok_or("exactly 2"),
            LayerKind::Concat => (n >= 2).then_some(()).ok_or("at least 2"),
            _ => (n == 1).then_some(()).ok_or("exactly 1"),
        };
        if let Err(expected) = expected {
            bad_arity[i] = true;
            violations.push(Violation::Arity { layer: l.name.clone(), kind: l.kind, expected, got: n });
        }
        for input in &l.inputs {
            if !index.contains_key(input) {
                violations.push(Violation::UnknownInput { layer: l.name.clone(), input: input.clone() });
            }
        }
        if let Some(w) = &l.params.weights {
            if !(l.kind.is_eltwise() || l.kind == LayerKind::Concat) {
                violations.push(Violation::MergeWeights { layer: l.name.clone(), detail: "only merge layers carry input weights".into() });
            } else if w.len() != n {
                violations.push(Violation::MergeWeights {
                    layer: l.name.clone(),
                    detail: format!("{} weights for {n} inputs", w.len()),
                });
            } else if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                violations.push(Violation::MergeWeights { layer: l.name.clone(), detail: format!("weights {w:?} do not sum to 1") });
            }
        }
    }

    // Kahn's algorithm, always releasing the lowest declaration index first.
    let mut indegree = vec![0usize; layers.len()];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); layers.len()];
    for (i, l) in layers.iter().enumerate() {
        for input in &l.inputs {
            if let Some(&p) = index.get(input) {
                indegree[i] += 1;
                children[p].push(i);
            }
        }
    }
    let mut ready: BTreeSet<usize> = (0..layers.len()).filter(|&i| indegree[i] == 0).collect();
    let mut topo = Vec::with_capacity(layers.len());
    while let Some(i) = ready.pop_first() {
        topo.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if topo.len() < layers.len() {
        let stuck = (0..layers.len()).filter(|&i| indegree[i] > 0).map(|i| layers[i].name.clone()).collect();
        violations.push(Violation::Cycle(stuck));
    }

    let mut shapes: Vec<Option<Shape>> = vec![None; layers.len()];
    for &i in &topo {
        let l = &layers[i];
        let ins: Option<Vec<(usize, Shape)>> =
            l.inputs.iter().map(|n| index.get(n).and_then(|&p| shapes[p].map(|s| (p, s)))).collect();
        let Some(ins) = ins else { continue };
        if bad_arity[i] {
            continue;
        }
        match infer_shape(l, &ins, layers) {
            Ok(s) => shapes[i] = Some(s),
            Err(v) => violations.push(v),
        }
    }

    let mut prev: Option<(&String, Shape)> = None;
    for s in sources {
        match index.get(s) {
            None => violations.push(Violation::UnknownSource(s.clone())),
            Some(&i) => {
                if let Some(shape) = shapes[i] {
                    if let Some((p, ps)) = prev {
                        if shape.height >= ps.height || shape.width >= ps.width {
                            violations.push(Violation::SourceOrder { earlier: p.clone(), later: s.clone() });
                        }
                    }
                    prev = Some((s, shape));
                }
            }
        }
    }
    if head_inputs.len() != sources.len() {
        violations.push(Violation::Head {
            layer: "<graph>".into(),
            detail: format!("{} head inputs for {} prediction sources", head_inputs.len(), sources.len()),
        });
    }
    for h in head_inputs {
        if !index.contains_key(h) {
            violations.push(Violation::UnknownSource(h.clone()));
        }
    }
    check_heads(layers, head_inputs, &mut violations);

    Analysis { violations, topo, shapes }
}

fn check_heads(layers: &[LayerSpec], head_inputs: &[String], violations: &mut Vec<Violation>) {
    let heads: Vec<&LayerSpec> = layers.iter().filter(|l| l.kind.is_head()).collect();
    if heads.is_empty() {
        return;
    }
    let mut per_input: BTreeMap<&str, (usize, usize)> = head_inputs.iter().map(|h| (h.as_str(), (0, 0))).collect();
    for h in &heads {
        let Some(input) = h.inputs.first() else { continue };
        match per_input.get_mut(input.as_str()) {
            None => violations.push(Violation::Head { layer: h.name.clone(), detail: format!("reads `{input}`, which is not a head input") }),
            Some(counts) => {
                if h.kind == LayerKind::ConfHead {
                    counts.0 += 1;
                } else {
                    counts.1 += 1;
                }
            }
        }
        if h.params.boxes_per_cell.is_none() {
            violations.push(Violation::MissingParam { layer: h.name.clone(), param: "boxes_per_cell" });
        }
        if h.kind == LayerKind::ConfHead && h.params.num_classes.is_none() {
            violations.push(Violation::MissingParam { layer: h.name.clone(), param: "num_classes" });
        }
    }
    for (input, (conf, loc)) in per_input {
        if conf != 1 || loc != 1 {
            violations.push(Violation::Head {
                layer: input.to_string(),
                detail: format!("needs exactly one conf and one loc head, has {conf} and {loc}"),
            });
        }
    }
}

fn infer_shape(l: &LayerSpec, ins: &[(usize, Shape)], layers: &[LayerSpec]) -> Result<Shape, Violation> {
    let missing = |param| Violation::MissingParam { layer: l.name.clone(), param };
    let shape_err = |detail: String| Violation::Shape { layer: l.name.clone(), detail };
    match l.kind {
        LayerKind::Data => Ok(Shape {
            channels: l.params.channels.ok_or_else(|| missing("channels"))?,
            height: l.params.height.ok_or_else(|| missing("height"))?,
            width: l.params.width.ok_or_else(|| missing("width"))?,
        }),
        LayerKind::Conv | LayerKind::ConfHead | LayerKind::LocHead => {
            let s = ins[0].1;
            let channels = l.params.channels.ok_or_else(|| missing("channels"))?;
            let kernel = l.params.kernel.ok_or_else(|| missing("kernel"))?;
            let (_, stride, pad) = l.window();
            let h = conv_out_size(s.height, kernel, stride, pad);
            let w = conv_out_size(s.width, kernel, stride, pad);
            match (h, w) {
                (Some(height), Some(width)) if channels > 0 => Ok(Shape { channels, height, width }),
                _ => Err(shape_err(format!("{kernel}x{kernel}/s{stride}/p{pad} window does not fit input {s}"))),
            }
        }
        LayerKind::Deconv => {
            let s = ins[0].1;
            let channels = l.params.channels.ok_or_else(|| missing("channels"))?;
            let kernel = l.params.kernel.ok_or_else(|| missing("kernel"))?;
            let (_, stride, pad) = l.window();
            let h = deconv_out_size(s.height, kernel, stride, pad);
            let w = deconv_out_size(s.width, kernel, stride, pad);
            if h <= 0 || w <= 0 || channels == 0 {
                return Err(shape_err(format!("transposed convolution of {s} yields empty output")));
            }
            Ok(Shape { channels, height: h as usize, width: w as usize })
        }
        LayerKind::Bn | LayerKind::Relu => Ok(ins[0].1),
        LayerKind::Pool => {
            let s = ins[0].1;
            let kernel = l.params.kernel.ok_or_else(|| missing("kernel"))?;
            let (_, stride, pad) = l.window();
            if pad >= kernel {
                return Err(shape_err(format!("pool pad {pad} must be smaller than kernel {kernel}")));
            }
            match (conv_out_size(s.height, kernel, stride, pad), conv_out_size(s.width, kernel, stride, pad)) {
                (Some(height), Some(width)) => Ok(Shape { channels: s.channels, height, width }),
                _ => Err(shape_err(format!("pool window {kernel} larger than padded input {s}"))),
            }
        }
        LayerKind::Concat => {
            let first = ins[0].1;
            let mut channels = 0;
            for &(p, s) in ins {
                if (s.height, s.width) != (first.height, first.width) {
                    return Err(shape_err(format!(
                        "inputs `{}` ({first}) and `{}` ({s}) differ spatially",
                        layers[ins[0].0].name, layers[p].name
                    )));
                }
                channels += s.channels;
            }
            Ok(Shape { channels, ..first })
        }
        LayerKind::EltwiseSum | LayerKind::EltwiseProd => {
            let (pa, a) = ins[0];
            let (pb, b) = ins[1];
            if a != b {
                return Err(shape_err(format!(
                    "inputs `{}` ({a}) and `{}` ({b}) have different shapes",
                    layers[pa].name, layers[pb].name
                )));
            }
            Ok(a)
        }
    }
}

/// Mutable graph under construction. Layers must be added after their inputs.
#[derive(Debug, Clone, Default)]
pub struct GraphBuilder {
    layers: Vec<LayerSpec>,
    prediction_sources: Vec<String>,
    head_inputs: Vec<String>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_graph(g: &NetGraph) -> Self {
        Self {
            layers: g.layers.clone(),
            prediction_sources: g.prediction_sources.clone(),
            head_inputs: g.head_inputs.clone(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.layers.iter().any(|l| l.name == name)
    }

    pub fn add(&mut self, layer: LayerSpec) -> Result<String, GraphError> {
        if self.contains(&layer.name) {
            return Err(GraphError::DuplicateLayer(layer.name));
        }
        for input in &layer.inputs {
            if !self.contains(input) {
                return Err(GraphError::UnknownLayer(input.clone()));
            }
        }
        let name = layer.name.clone();
        self.layers.push(layer);
        Ok(name)
    }

    pub fn prediction_sources(&self) -> &[String] {
        &self.prediction_sources
    }

    pub fn head_inputs(&self) -> &[String] {
        &self.head_inputs
    }

    pub fn set_prediction_sources(&mut self, sources: Vec<String>) {
        self.head_inputs = sources.clone();
        self.prediction_sources = sources;
    }

    pub fn replace_source(&mut self, index: usize, name: String) {
        self.prediction_sources[index] = name.clone();
        self.head_inputs[index] = name;
    }

    pub fn set_head_input(&mut self, index: usize, name: String) {
        self.head_inputs[index] = name;
    }

    /// Activation shape of `name` given the layers added so far.
    pub fn shape(&self, name: &str) -> Result<Shape, GraphError> {
        let i = self.layers.iter().position(|l| l.name == name).ok_or_else(|| GraphError::UnknownLayer(name.into()))?;
        let analysis = analyze_layers(&self.layers, &[], &[]);
        analysis.shapes[i].ok_or(GraphError::Invalid(analysis.violations))
    }

    pub fn seal(self) -> Result<NetGraph, GraphError> {
        let analysis = analyze_layers(&self.layers, &self.prediction_sources, &self.head_inputs);
        if !analysis.violations.is_empty() {
            return Err(GraphError::Invalid(analysis.violations));
        }
        let index = self.layers.iter().enumerate().map(|(i, l)| (l.name.clone(), i)).collect();
        let shapes = analysis.shapes.into_iter().map(|s| s.expect("validated shape")).collect();
        Ok(NetGraph {
            layers: self.layers,
            index,
            prediction_sources: self.prediction_sources,
            head_inputs: self.head_inputs,
            topo_order: analysis.topo,
            shapes,
        })
    }
}
