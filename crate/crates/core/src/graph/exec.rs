//! Weight storage and forward execution of a [`NetGraph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::{LayerKind, LayerSpec, NetGraph};
use crate::autograd::{Tape, Var};
use crate::error::GraphError;
use crate::ops::{norm::DEFAULT_EPS, EltwiseMode, RunningStats};
use crate::tensor::{Scalar, Tensor};

/// Named parameter tensors: `{layer}.weight`, `{layer}.bias`, and for batch
/// norm `{layer}.gamma`, `{layer}.beta`, `{layer}.running_mean`,
/// `{layer}.running_var`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Layer that owns a parameter name.
pub fn owning_layer(param: &str) -> &str {
    param.rsplit_once('.').map_or(param, |(layer, _)| layer)
}

fn expected_params(graph: &NetGraph, layer: &LayerSpec) -> Vec<(String, Vec<usize>)> {
    let in_channels = || graph.shape(&layer.inputs[0]).expect("validated").channels;
    let out = graph.shape(&layer.name).expect("validated");
    let name = &layer.name;
    match layer.kind {
        LayerKind::Conv | LayerKind::ConfHead | LayerKind::LocHead => {
            let k = layer.params.kernel.unwrap_or(1);
            vec![
                (format!("{name}.weight"), vec![out.channels, in_channels(), k, k]),
                (format!("{name}.bias"), vec![out.channels]),
            ]
        }
        LayerKind::Deconv => {
            let k = layer.params.kernel.unwrap_or(1);
            vec![(format!("{name}.weight"), vec![in_channels(), out.channels, k, k])]
        }
        LayerKind::Bn => ["gamma", "beta", "running_mean", "running_var"]
            .iter()
            .map(|p| (format!("{name}.{p}"), vec![out.channels]))
            .collect(),
        _ => vec![],
    }
}

/// Bilinear upsampling taps for one axis, normalized so every output position
/// receives total weight 1 at the given stride.
fn bilinear_taps(kernel: usize, stride: usize) -> Vec<f64> {
    let factor = kernel.div_ceil(2) as f64;
    let center = if kernel % 2 == 1 { factor - 1.0 } else { factor - 0.5 };
    let taps: Vec<f64> = (0..kernel).map(|i| 1.0 - (i as f64 - center).abs() / factor).collect();
    let total: f64 = taps.iter().sum();
    taps.iter().map(|t| t * stride as f64 / total).collect()
}

impl<T: Scalar> WeightStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    /// Parameters of one layer, with their shapes.
    pub fn expected_for(graph: &NetGraph, layer: &LayerSpec) -> Vec<(String, Vec<usize>)> {
        expected_params(graph, layer)
    }

    /// Every parameter the graph needs, with its shape, in layer order.
    pub fn expected(graph: &NetGraph) -> Vec<(String, Vec<usize>)> {
        graph.layers().iter().flat_map(|l| expected_params(graph, l)).collect()
    }

    /// Centered uniform fan-in initialization for convolutions
    /// (`U(±√(3/fan_in))`, zero bias), bilinear upsampling for transposed
    /// convolutions, `γ=1, β=0` and unit running variance for batch norm.
    pub fn init<R: Rng>(graph: &NetGraph, rng: &mut R) -> Self {
        let mut store = Self::new();
        for layer in graph.layers() {
            for (name, shape) in expected_params(graph, layer) {
                let suffix = name.rsplit_once('.').map(|(_, s)| s).unwrap_or("");
                let t = match (layer.kind, suffix) {
                    (LayerKind::Deconv, _) => Self::bilinear(&shape, layer.params.stride.unwrap_or(1)),
                    (_, "weight") => {
                        let fan_in: usize = shape[1..].iter().product();
                        let bound = (3.0 / fan_in as f64).sqrt();
                        Tensor::from_fn(&shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                    }
                    (_, "gamma" | "running_var") => Tensor::ones(&shape),
                    _ => Tensor::zeros(&shape),
                };
                store.tensors.insert(name, t);
            }
        }
        store
    }

    /// All convolution weights and biases zero; batch norm at identity.
    pub fn zeros(graph: &NetGraph) -> Self {
        let mut store = Self::new();
        for (name, shape) in Self::expected(graph) {
            let t = if name.ends_with(".gamma") || name.ends_with(".running_var") {
                Tensor::ones(&shape)
            } else {
                Tensor::zeros(&shape)
            };
            store.tensors.insert(name, t);
        }
        store
    }

    fn bilinear(shape: &[usize], stride: usize) -> Tensor<T> {
        let (cin, cout, k) = (shape[0], shape[1], shape[2]);
        let taps = bilinear_taps(k, stride);
        let mut t = Tensor::zeros(shape);
        for co in 0..cout {
            let ci = co % cin;
            for i in 0..k {
                for j in 0..k {
                    t.data_mut()[((ci * cout + co) * k + i) * k + j] = T::from_f64_lossy(taps[i] * taps[j]);
                }
            }
        }
        t
    }

    /// Fails with the first missing or mis-shaped parameter.
    pub fn check(&self, graph: &NetGraph) -> Result<(), GraphError> {
        for (name, shape) in Self::expected(graph) {
            let t = self.tensors.get(&name).ok_or_else(|| GraphError::MissingWeight(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(GraphError::WeightShape { name, expected: shape, got: t.shape().to_vec() });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>, GraphError> {
        self.tensors.get(name).ok_or_else(|| GraphError::MissingWeight(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Copies every tensor of `other` whose name and shape match a parameter of this store.
    pub fn adopt(&mut self, other: &WeightStore<T>) -> usize {
        let mut copied = 0;
        for (name, t) in &mut self.tensors {
            if let Some(src) = other.tensors.get(name) {
                if src.shape() == t.shape() {
                    *t = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics for trainable batch-norm layers.
    Train,
    /// Running statistics everywhere.
    Eval,
}

/// Tape handles produced by [`forward_on_tape`].
#[derive(Debug)]
pub struct ForwardPass<T: Scalar> {
    /// Parameter leaves recorded as trainable.
    pub params: Vec<(String, Var)>,
    /// Batch statistics `(layer, mean, var)` of train-mode batch-norm layers.
    pub bn_stats: Vec<(String, Vec<T>, Vec<T>)>,
    pub activations: HashMap<String, Var>,
    /// Per-scale `(conf N×Bs×(C+1), loc N×Bs×4)`.
    pub scales: Vec<(Var, Var)>,
    /// All scales concatenated: `N×A×(C+1)` and `N×A×4`.
    pub conf: Var,
    pub loc: Var,
}

/// Records a forward pass of `graph` on `tape`. Parameters of layers for
/// which `trainable` is false become constants, and their batch-norm layers
/// run in eval mode so running statistics stay untouched.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &NetGraph,
    weights: &WeightStore<T>,
    images: &Tensor<T>,
    mode: ForwardMode,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<ForwardPass<T>, GraphError> {
    let heads = graph.heads();
    if heads.is_empty() {
        return Err(GraphError::NoSources);
    }
    let input = graph.input_shape();
    let expected = [input.channels, input.height, input.width];
    let images = match images.shape() {
        s if s == expected => images.reshape(&[1, input.channels, input.height, input.width])?,
        [_, rest @ ..] if rest == expected => images.clone(),
        s => return Err(GraphError::InputShape { expected: expected.to_vec(), got: s.to_vec() }),
    };

    let mut params = Vec::new();
    let mut bn_stats = Vec::new();
    let mut acts: HashMap<String, Var> = HashMap::new();
    let eps = T::from_f64_lossy(DEFAULT_EPS);

    for layer in graph.topo_order() {
        let learn = mode == ForwardMode::Train && trainable(&layer.name);
        let mut leaf = |tape: &mut Tape<T>, suffix: &str| -> Result<Var, GraphError> {
            let name = format!("{}.{suffix}", layer.name);
            let t = weights.require(&name)?.clone();
            Ok(if learn {
                let v = tape.param(t);
                params.push((name, v));
                v
            } else {
                tape.constant(t)
            })
        };
        let x = |i: usize| acts[&layer.inputs[i]];
        let (_, stride, pad) = layer.window();
        let out = match layer.kind {
            LayerKind::Data => tape.constant(images.clone()),
            LayerKind::Conv | LayerKind::ConfHead | LayerKind::LocHead => {
                let w = leaf(tape, "weight")?;
                let b = leaf(tape, "bias")?;
                tape.conv2d(x(0), w, Some(b), stride, pad)?
            }
            LayerKind::Deconv => {
                let w = leaf(tape, "weight")?;
                tape.deconv2d(x(0), w, stride, pad)?
            }
            LayerKind::Bn => {
                let gamma = leaf(tape, "gamma")?;
                let beta = leaf(tape, "beta")?;
                if learn {
                    let (v, mean, var) = tape.batch_norm_train(x(0), gamma, beta, eps)?;
                    bn_stats.push((layer.name.clone(), mean, var));
                    v
                } else {
                    let stats = RunningStats {
                        mean: weights.require(&format!("{}.running_mean", layer.name))?.clone(),
                        var: weights.require(&format!("{}.running_var", layer.name))?.clone(),
                    };
                    tape.batch_norm_eval(x(0), gamma, beta, eps, Some(&stats))?
                }
            }
            LayerKind::Relu => tape.relu(x(0)),
            LayerKind::Pool => tape.max_pool2d(x(0), layer.params.kernel.unwrap_or(2), stride, pad)?,
            LayerKind::Concat => {
                let ins: Vec<Var> = (0..layer.inputs.len()).map(x).collect();
                tape.concat_channels(&ins)?
            }
            // Merge weights only affect depth bookkeeping, not arithmetic.
            LayerKind::EltwiseSum => tape.eltwise(x(0), x(1), EltwiseMode::Sum)?,
            LayerKind::EltwiseProd => tape.eltwise(x(0), x(1), EltwiseMode::Prod)?,
        };
        acts.insert(layer.name.clone(), out);
    }

    let mut scales = Vec::with_capacity(heads.len());
    for h in &heads {
        let conf = tape.flatten_head(acts[&h.conf], h.num_classes + 1)?;
        let loc = tape.flatten_head(acts[&h.loc], 4)?;
        scales.push((conf, loc));
    }
    let confs: Vec<Var> = scales.iter().map(|s| s.0).collect();
    let locs: Vec<Var> = scales.iter().map(|s| s.1).collect();
    let conf = tape.concat_rows(&confs)?;
    let loc = tape.concat_rows(&locs)?;
    Ok(ForwardPass { params, bn_stats, activations: acts, scales, conf, loc })
}

/// Head outputs of one prediction source.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleOutput<T: Scalar = f32> {
    pub source: String,
    /// `N × (H·W·boxes) × (classes+1)`
    pub conf: Tensor<T>,
    /// `N × (H·W·boxes) × 4`
    pub loc: Tensor<T>,
}

/// Eval-mode forward pass; returns per-scale head outputs in source order.
pub fn forward<T: Scalar>(graph: &NetGraph, weights: &WeightStore<T>, images: &Tensor<T>) -> Result<Vec<ScaleOutput<T>>, GraphError> {
    let mut tape = Tape::new();
    let pass = forward_on_tape(&mut tape, graph, weights, images, ForwardMode::Eval, &|_| false)?;
    Ok(graph
        .heads()
        .into_iter()
        .zip(&pass.scales)
        .map(|(h, &(c, l))| ScaleOutput { source: h.source, conf: tape.value(c).clone(), loc: tape.value(l).clone() })
        .collect())
}
