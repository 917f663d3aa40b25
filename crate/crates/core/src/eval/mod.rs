//! Post-processing, VOC-style mean average precision and latency benchmarks.

mod ap;
mod detect;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use ap::{assign, average_precision, pr_curve, ApMode, GtBox};
pub use detect::{decode_predictions, detections_jsonl, nms, postprocess, DetectConfig, Detection, DUMP_SCORE_THRESH};

use crate::anchors::{AnchorSet, GroundTruth};
use crate::error::EvalError;
use crate::graph::{forward, NetGraph, WeightStore};
use crate::tensor::Tensor;
use crate::train::SynthSample;

/// Thread-count variable for evaluation.
pub const THREADS_ENV: &str = "ESSD_THREADS";

/// `ESSD_THREADS` if set to a positive integer, else 1.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub detect: DetectConfig,
    pub iou_thresh: f64,
    pub ap_mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { detect: DetectConfig::default(), iou_thresh: 0.5, ap_mode: ApMode::Voc2007 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassReport>,
    /// Mean AP over classes with at least one ground-truth box.
    pub map: f64,
    pub num_images: usize,
    pub num_detections: usize,
    pub iou_thresh: f64,
    pub ap_mode: ApMode,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores detections against `gts[image_id]`.
pub fn evaluate_detections(dets: &[Detection], gts: &[Vec<GroundTruth>], num_classes: usize, iou_thresh: f64, mode: ApMode) -> EvalReport {
    let per_class: Vec<ClassReport> = (0..num_classes)
        .map(|class| {
            let of_class: Vec<Detection> = dets.iter().filter(|d| d.class == class).copied().collect();
            let boxes: Vec<GtBox> = gts
                .iter()
                .enumerate()
                .flat_map(|(image_id, g)| g.iter().filter(|g| g.class == class).map(move |g| GtBox { image_id, bbox: g.bbox }))
                .collect();
            ClassReport {
                class,
                ap: average_precision(&of_class, &boxes, iou_thresh, mode),
                num_gt: boxes.len(),
                num_detections: of_class.len(),
            }
        })
        .collect();
    let scored: Vec<f64> = per_class.iter().filter(|c| c.num_gt > 0).map(|c| c.ap).collect();
    let map = if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    EvalReport { per_class, map, num_images: gts.len(), num_detections: dets.len(), iou_thresh, ap_mode: mode }
}

/// Detections for one `3×H×W` image.
pub fn detect_image(
    graph: &NetGraph,
    weights: &WeightStore<f32>,
    anchors: &AnchorSet,
    image: &Tensor<f32>,
    cfg: &DetectConfig,
    image_id: usize,
) -> Result<Vec<Detection>, EvalError> {
    let num_classes = graph.num_classes().ok_or(EvalError::Graph(crate::error::GraphError::NoSources))?;
    let outputs = forward(graph, weights, image)?;
    let conf: Vec<f32> = outputs.iter().flat_map(|o| o.conf.data().iter().copied()).collect();
    let loc: Vec<f32> = outputs.iter().flat_map(|o| o.loc.data().iter().copied()).collect();
    postprocess(&conf, &loc, anchors, num_classes, cfg, image_id)
}

/// Detections for every sample, in image order. Images are processed on
/// `threads` workers; the result does not depend on the thread count.
pub fn detect_all(
    graph: &NetGraph,
    weights: &WeightStore<f32>,
    anchors: &AnchorSet,
    data: &[SynthSample],
    cfg: &DetectConfig,
    threads: usize,
) -> Result<Vec<Detection>, EvalError> {
    use rayon::prelude::*;
    weights.check(graph)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().map_err(|e| EvalError::Pool(e.to_string()))?;
    let per_image: Vec<Vec<Detection>> = pool.install(|| {
        data.par_iter().enumerate().map(|(i, s)| detect_image(graph, weights, anchors, &s.image, cfg, i)).collect::<Result<_, _>>()
    })?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn evaluate(
    graph: &NetGraph,
    weights: &WeightStore<f32>,
    anchors: &AnchorSet,
    data: &[SynthSample],
    cfg: &EvalConfig,
    threads: usize,
) -> Result<EvalReport, EvalError> {
    let num_classes = graph.num_classes().ok_or(EvalError::Graph(crate::error::GraphError::NoSources))?;
    let dets = detect_all(graph, weights, anchors, data, &cfg.detect, threads)?;
    let gts: Vec<Vec<GroundTruth>> = data.iter().map(|s| s.gts.clone()).collect();
    Ok(evaluate_detections(&dets, &gts, num_classes, cfg.iou_thresh, cfg.ap_mode))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch_size: usize,
    /// `"{height}x{width}"`
    pub input_resolution: String,
    pub n_warmup: usize,
    pub n_timed: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub fps: f64,
}

/// Sequential single-image forward + decode + NMS timings.
pub fn bench(
    graph: &NetGraph,
    weights: &WeightStore<f32>,
    anchors: &AnchorSet,
    image: &Tensor<f32>,
    cfg: &DetectConfig,
    n_warmup: usize,
    n_timed: usize,
) -> Result<BenchReport, EvalError> {
    if n_timed == 0 {
        return Err(EvalError::Config("bench needs at least one timed run".into()));
    }
    weights.check(graph)?;
    for _ in 0..n_warmup {
        detect_image(graph, weights, anchors, image, cfg, 0)?;
    }
    let mut times = Vec::with_capacity(n_timed);
    for _ in 0..n_timed {
        let start = Instant::now();
        detect_image(graph, weights, anchors, image, cfg, 0)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(latency_report(graph, &times, n_warmup))
}

fn latency_report(graph: &NetGraph, times_ms: &[f64], n_warmup: usize) -> BenchReport {
    let mean_ms = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
    let mut sorted = times_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median_ms = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
    let input = graph.input_shape();
    BenchReport {
        batch_size: 1,
        input_resolution: format!("{}x{}", input.height, input.width),
        n_warmup,
        n_timed: times_ms.len(),
        mean_ms,
        median_ms,
        fps: 1e3 / mean_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::BBox;
    use crate::model::ModelSpec;

    fn gt(class: usize, x: f64) -> GroundTruth {
        GroundTruth { bbox: BBox::new(x, 0.5, 0.2, 0.2), class }
    }

    #[test]
    fn oracle_detector_scores_one() {
        let gts = vec![vec![gt(0, 0.2), gt(1, 0.6)], vec![gt(2, 0.5)]];
        let dets: Vec<Detection> = gts
            .iter()
            .enumerate()
            .flat_map(|(i, g)| g.iter().map(move |g| Detection { image_id: i, class: g.class, score: 1.0, bbox: g.bbox }))
            .collect();
        let r = evaluate_detections(&dets, &gts, 3, 0.5, ApMode::Voc2007);
        assert_eq!(r.map, 1.0);
        assert_eq!(evaluate_detections(&[], &gts, 3, 0.5, ApMode::Voc2007).map, 0.0);
    }

    #[test]
    fn classes_without_gt_are_skipped() {
        let gts = vec![vec![gt(0, 0.2)]];
        let dets = [Detection { image_id: 0, class: 0, score: 0.9, bbox: gts[0][0].bbox }];
        let r = evaluate_detections(&dets, &gts, 3, 0.5, ApMode::Voc2007);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_class[1].num_gt, 0);
    }

    #[test]
    fn latency_fields() {
        let g = ModelSpec::toy("SSD").unwrap().graph().unwrap();
        let r = latency_report(&g, &[2.0, 4.0, 9.0], 1);
        assert_eq!(r.batch_size, 1);
        assert_eq!(r.input_resolution, "64x64");
        assert_eq!(r.median_ms, 4.0);
        assert!((r.fps - 1e3 / 5.0).abs() < 1e-9);
    }

    #[test]
    fn evaluation_ignores_thread_count() {
        use rand::SeedableRng;
        let spec = ModelSpec::toy("ESSD-sum").unwrap();
        let g = spec.graph().unwrap();
        let w = WeightStore::init(&g, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let data = crate::train::synth_dataset(2, 4, 64);
        let anchors = spec.anchors().unwrap();
        let a = evaluate(&g, &w, &anchors, &data, &EvalConfig::default(), 1).unwrap();
        let b = evaluate(&g, &w, &anchors, &data, &EvalConfig::default(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_images, 4);
    }
}
