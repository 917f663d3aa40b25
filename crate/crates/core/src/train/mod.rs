//! Phase-wise training: SGD with momentum, layer freezing, a synthetic
//! dataset and the binary weight format.

mod data;
mod io;
mod plan;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{covers, heldout_seed, synth_dataset, synth_dataset_with, DatasetConfig, SynthSample, CIRCLE, SQUARE, TRIANGLE};
pub use io::{load_weights, read_weights, save_weights, write_weights, MAGIC, VERSION};
pub use plan::{canonical_phase_plan, Network, Phase, PhasePlan, Segment, Trainable};

use crate::anchors::{match_anchors, MatchResult, Variances, DEFAULT_MATCH_THRESHOLD};
use crate::autograd::Tape;
use crate::error::TrainError;
use crate::graph::{forward_on_tape, owning_layer, ForwardMode, NetGraph, WeightStore};
use crate::loss::{multibox_on_tape, LossBreakdown, MultiboxConfig};
use crate::model::ModelSpec;
use crate::ops::RunningStats;
use crate::tensor::Tensor;

/// Iteration-count divisor applied to the canonical plan by default.
pub const DEFAULT_SCALE: usize = 1000;
/// Learning-rate multiplier applied on top of the plan by default. With a
/// thousandth of the iterations, the plan's rates barely move a freshly
/// initialized toy network.
pub const DEFAULT_LR_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

fn is_statistic(param: &str) -> bool {
    param.ends_with(".running_mean") || param.ends_with(".running_var")
}

/// `v ← μ·v + g + λ·w; w ← w − lr·v` for every learnable parameter whose
/// layer is not in `frozen`. Frozen parameters and their velocities are left
/// untouched; running statistics are never updated here.
pub fn sgd_step(
    weights: &mut WeightStore<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    velocity: &mut WeightStore<f32>,
    hp: &SgdParams,
    frozen: &BTreeSet<String>,
) -> Result<(), TrainError> {
    let names: Vec<String> = weights
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| !is_statistic(n) && !frozen.contains(owning_layer(n)))
        .collect();
    for name in &names {
        if !grads.contains_key(name) {
            return Err(TrainError::MissingGradient(name.clone()));
        }
    }
    let (lr, mu, wd) = (hp.lr as f32, hp.momentum as f32, hp.weight_decay as f32);
    for name in names {
        let g = &grads[&name];
        let w = weights.get_mut(&name).expect("listed above");
        if velocity.get(&name).is_none() {
            velocity.insert(name.clone(), Tensor::zeros(w.shape()));
        }
        let v = velocity.get_mut(&name).expect("inserted above");
        for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = mu * *vi + gi + wd * *wi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub plan: PhasePlan,
    /// Multiplies every learning rate of `plan`.
    pub lr_scale: f64,
    pub dataset: DatasetConfig,
    pub loss: MultiboxConfig,
    pub match_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            plan: canonical_phase_plan().scale(DEFAULT_SCALE),
            lr_scale: DEFAULT_LR_SCALE,
            dataset: DatasetConfig::default(),
            loss: MultiboxConfig::default(),
            match_threshold: DEFAULT_MATCH_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.dataset.n_images == 0 {
            return Err(TrainError::Config("dataset needs at least one image".into()));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(TrainError::Config(format!("lr_scale {} must be positive", self.lr_scale)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(TrainError::Config(format!("momentum {} / weight decay {}", self.momentum, self.weight_decay)));
        }
        self.plan.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: usize,
    pub iter: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the network the last executed phase ran on.
    pub weights: WeightStore<f32>,
    pub log: Vec<LogRecord>,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }
}

/// Matches every sample's ground truth against the model's default boxes.
pub fn match_dataset(spec: &ModelSpec, data: &[SynthSample], threshold: f64) -> Result<Vec<MatchResult>, TrainError> {
    let anchors = spec.anchors()?;
    data.iter()
        .map(|s| match_anchors(anchors.boxes(), &s.gts, threshold, Variances::default()).map_err(TrainError::from))
        .collect()
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_BASE_STREAM: u64 = 1;
const INIT_FULL_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 16;

/// Names of weight-bearing layers a phase updates.
fn trainable_layers(spec: &ModelSpec, graph: &NetGraph, phase: &Phase) -> Result<BTreeSet<String>, TrainError> {
    let names: BTreeSet<String> = match &phase.trainable {
        Trainable::All => graph.layers().iter().map(|l| l.name.clone()).collect(),
        Trainable::Extension => spec.extension_layers()?,
        Trainable::Layers(list) => {
            for n in list {
                if !graph.contains(n) {
                    return Err(TrainError::UnknownLayer(n.clone()));
                }
            }
            list.iter().cloned().collect()
        }
    };
    Ok(names.into_iter().filter(|n| graph.layer(n).is_some_and(|l| !WeightStore::<f32>::expected_for(graph, l).is_empty())).collect())
}

/// Weights for `graph`: freshly initialized from `seed`, then overwritten by
/// every matching tensor of `current`.
fn weights_for(graph: &NetGraph, network: Network, seed: u64, current: Option<&WeightStore<f32>>) -> WeightStore<f32> {
    let stream = match network {
        Network::Base => INIT_BASE_STREAM,
        Network::Full => INIT_FULL_STREAM,
    };
    let mut w = WeightStore::init(graph, &mut rng_for(seed, stream));
    if let Some(c) = current {
        w.adopt(c);
    }
    w
}

/// Runs the given 1-based `phases` of `config.plan` in order.
///
/// `init` supplies weights produced by earlier phases (required when the
/// first requested phase is not phase 1). A phase whose trainable set is
/// empty, such as the extension-only phase of a plain SSD, is skipped.
pub fn train(spec: &ModelSpec, config: &TrainConfig, phases: &[usize], init: Option<&WeightStore<f32>>) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if phases.is_empty() {
        return Err(TrainError::Config("no phases requested".into()));
    }
    if phases[0] > 1 && init.is_none() {
        return Err(TrainError::Config(format!("phase {} needs the weights of phase {}", phases[0], phases[0] - 1)));
    }
    let data = synth_dataset_with(config.seed, &config.dataset, spec.input_size());
    let matches = match_dataset(spec, &data, config.match_threshold)?;
    let base = spec.base_graph()?;
    let full = spec.graph()?;

    let mut current: Option<WeightStore<f32>> = init.cloned();
    let mut log = Vec::new();
    for &p in phases {
        let phase = config.plan.phase(p)?;
        let graph = match phase.network {
            Network::Base => &base,
            Network::Full => &full,
        };
        let mut weights = weights_for(graph, phase.network, config.seed, current.as_ref());
        let trainable = trainable_layers(spec, graph, phase)?;
        if !trainable.is_empty() {
            run_phase(graph, &mut weights, &trainable, config, p, &data, &matches, &mut log)?;
        }
        current = Some(weights);
    }
    Ok(TrainOutcome { weights: current.expect("at least one phase"), log })
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    graph: &NetGraph,
    weights: &mut WeightStore<f32>,
    trainable: &BTreeSet<String>,
    config: &TrainConfig,
    phase_no: usize,
    data: &[SynthSample],
    matches: &[MatchResult],
    log: &mut Vec<LogRecord>,
) -> Result<(), TrainError> {
    let phase = config.plan.phase(phase_no)?;
    let frozen: BTreeSet<String> = graph.layers().iter().map(|l| l.name.clone()).filter(|n| !trainable.contains(n)).collect();
    let mut velocity = WeightStore::new();
    let mut rng = rng_for(config.seed, SHUFFLE_STREAM + phase_no as u64);
    let mut order: Vec<usize> = Vec::new();

    for iter in 0..phase.iters() {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled"));
        }
        let images = Tensor::stack(&batch.iter().map(|&i| data[i].image.clone()).collect::<Vec<_>>())?;
        let batch_matches: Vec<MatchResult> = batch.iter().map(|&i| matches[i].clone()).collect();

        let mut tape = Tape::<f32>::new();
        let pass = forward_on_tape(&mut tape, graph, weights, &images, ForwardMode::Train, &|l| trainable.contains(l))?;
        let (loss, breakdown) = multibox_on_tape(&mut tape, pass.conf, pass.loc, &batch_matches, &config.loss)?;
        let mut grads = tape.backward(loss)?;
        let grads: BTreeMap<String, Tensor<f32>> = pass.params.iter().map(|(n, v)| (n.clone(), grads.take(*v))).collect();

        for (layer, mean, var) in &pass.bn_stats {
            let mean_key = format!("{layer}.running_mean");
            let var_key = format!("{layer}.running_var");
            let mut stats = RunningStats { mean: weights.require(&mean_key)?.clone(), var: weights.require(&var_key)?.clone() };
            stats.update(mean, var);
            weights.insert(mean_key, stats.mean);
            weights.insert(var_key, stats.var);
        }

        let lr = config.plan.lr_at(phase_no, iter)? * config.lr_scale;
        let hp = SgdParams { lr, momentum: config.momentum, weight_decay: config.weight_decay };
        sgd_step(weights, &grads, &mut velocity, &hp, &frozen)?;
        log.push(LogRecord { phase: phase_no, iter, lr, loss: breakdown });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f32) -> WeightStore<f32> {
        let mut s = WeightStore::new();
        s.insert(name, Tensor::full(&[2], v));
        s
    }

    fn grads(name: &str, v: f32) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([(name.to_string(), Tensor::full(&[2], v))])
    }

    #[test]
    fn single_step() {
        let mut w = one("c.weight", 0.0);
        let mut v = WeightStore::new();
        let hp = SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut w, &grads("c.weight", 1.0), &mut v, &hp, &BTreeSet::new()).unwrap();
        assert!((w.get("c.weight").unwrap().data()[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn two_steps_accumulate_momentum() {
        let mut w = one("c.weight", 1.0);
        let mut v = WeightStore::new();
        let hp = SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        for _ in 0..2 {
            sgd_step(&mut w, &grads("c.weight", 0.5), &mut v, &hp, &BTreeSet::new()).unwrap();
        }
        let expected = 1.0 - 0.1 * 0.5 * (2.0 + 0.9);
        assert!((w.get("c.weight").unwrap().data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn frozen_layers_untouched() {
        let mut w = one("c.weight", 1.0);
        let mut v = one("c.weight", 0.25);
        let hp = SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 5e-4 };
        let frozen = BTreeSet::from(["c".to_string()]);
        sgd_step(&mut w, &grads("c.weight", 3.0), &mut v, &hp, &frozen).unwrap();
        assert_eq!(w, one("c.weight", 1.0));
        assert_eq!(v, one("c.weight", 0.25));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut w = one("c.weight", 1.0);
        let hp = SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let err = sgd_step(&mut w, &BTreeMap::new(), &mut WeightStore::new(), &hp, &BTreeSet::new()).unwrap_err();
        assert!(matches!(err, TrainError::MissingGradient(n) if n == "c.weight"));
    }

    #[test]
    fn running_stats_are_not_stepped() {
        let mut w = one("n.running_mean", 0.5);
        let hp = SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 0.1 };
        sgd_step(&mut w, &BTreeMap::new(), &mut WeightStore::new(), &hp, &BTreeSet::new()).unwrap();
        assert_eq!(w, one("n.running_mean", 0.5));
    }

    fn tiny_config(iters: usize) -> TrainConfig {
        let seg = |lr| vec![Segment { lr, iters }];
        TrainConfig {
            batch_size: 2,
            lr_scale: 1.0,
            dataset: DatasetConfig { n_images: 4, max_shapes: 2 },
            plan: PhasePlan {
                phases: vec![
                    Phase { network: Network::Base, trainable: Trainable::All, segments: seg(1e-2) },
                    Phase { network: Network::Full, trainable: Trainable::Extension, segments: seg(1e-2) },
                    Phase { network: Network::Full, trainable: Trainable::All, segments: seg(1e-3) },
                ],
            },
            ..Default::default()
        }
    }

    #[test]
    fn extension_phase_freezes_base_layers() {
        let spec = ModelSpec::toy("ESSD-sum").unwrap();
        let cfg = tiny_config(2);
        let p1 = train(&spec, &cfg, &[1], None).unwrap();
        let p2 = train(&spec, &cfg, &[2], Some(&p1.weights)).unwrap();
        let base = spec.base_graph().unwrap();
        let full = spec.graph().unwrap();
        let mut checked = 0;
        for (name, t) in p1.weights.iter() {
            let layer = owning_layer(name);
            if base.contains(layer) && full.contains(layer) {
                assert_eq!(p2.weights.get(name), Some(t), "{name} changed");
                checked += 1;
            }
        }
        assert!(checked > 20);
        let start = weights_for(&full, Network::Full, cfg.seed, Some(&p1.weights));
        assert!(p2.weights.iter().any(|(n, t)| n.ends_with("_pred_conv.weight") && start.get(n) != Some(t)));
        assert_eq!(p2.log.len(), 2);
    }

    #[test]
    fn ssd_skips_extension_phase() {
        let spec = ModelSpec::toy("SSD").unwrap();
        let cfg = tiny_config(1);
        let out = train(&spec, &cfg, &[1, 2, 3], None).unwrap();
        let phases: Vec<usize> = out.log.iter().map(|r| r.phase).collect();
        assert_eq!(phases, vec![1, 3]);
    }

    #[test]
    fn later_phase_needs_weights() {
        let spec = ModelSpec::toy("ESSD-sum").unwrap();
        assert!(matches!(train(&spec, &tiny_config(1), &[2], None), Err(TrainError::Config(_))));
    }

    #[test]
    fn unknown_trainable_layer() {
        let spec = ModelSpec::toy("ESSD-sum").unwrap();
        let mut cfg = tiny_config(1);
        cfg.plan.phases[0].trainable = Trainable::Layers(vec!["ghost".into()]);
        assert!(matches!(train(&spec, &cfg, &[1], None), Err(TrainError::UnknownLayer(n)) if n == "ghost"));
    }

    #[test]
    fn log_covers_every_iteration_and_is_deterministic() {
        let spec = ModelSpec::toy("ESSD-sum").unwrap();
        let cfg = tiny_config(2);
        let a = train(&spec, &cfg, &[1, 2, 3], None).unwrap();
        let b = train(&spec, &cfg, &[1, 2, 3], None).unwrap();
        assert_eq!(a.log.len(), cfg.plan.total_iters());
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.log_jsonl(), b.log_jsonl());
        let first: serde_json::Value = serde_json::from_str(a.log_jsonl().lines().next().unwrap()).unwrap();
        assert_eq!(first["phase"], 1);
        assert!(first["total"].as_f64().unwrap() > 0.0);
    }
}
