//! Turning head outputs into scored boxes.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::anchors::{decode, iou, AnchorSet, BBox, Variances};
use crate::error::EvalError;
use crate::ops::softmax_rows;

/// A scored box for one object class (0-based, background excluded).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "DetectionRecord", from = "DetectionRecord")]
pub struct Detection {
    pub image_id: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Serialized form: `{"image_id", "class", "score", "box": [xmin, ymin, xmax, ymax]}`.
#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    image_id: usize,
    class: usize,
    score: f64,
    #[serde(rename = "box")]
    corners: [f64; 4],
}

impl From<Detection> for DetectionRecord {
    fn from(d: Detection) -> Self {
        DetectionRecord { image_id: d.image_id, class: d.class, score: d.score, corners: d.bbox.corners() }
    }
}

impl From<DetectionRecord> for Detection {
    fn from(r: DetectionRecord) -> Self {
        let [x0, y0, x1, y1] = r.corners;
        Detection { image_id: r.image_id, class: r.class, score: r.score, bbox: BBox::from_corners(x0, y0, x1, y1) }
    }
}

/// Score descending, ties to the lower index.
pub(crate) fn by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Per-class candidates before suppression: softmax scores above
/// `score_thresh`, the `top_k` best per class, boxes decoded and clipped to
/// the image.
///
/// `conf` is `A×(C+1)` row-major logits with background at column 0, `loc`
/// is `A×4`.
pub fn decode_predictions(
    conf: &[f32],
    loc: &[f32],
    anchors: &AnchorSet,
    num_classes: usize,
    score_thresh: f64,
    top_k: usize,
    image_id: usize,
) -> Result<Vec<Detection>, EvalError> {
    let width = num_classes + 1;
    let a = anchors.len();
    if conf.len() != a * width {
        return Err(EvalError::AnchorCount { expected: a, got: conf.len() / width });
    }
    if loc.len() != a * 4 {
        return Err(EvalError::AnchorCount { expected: a, got: loc.len() / 4 });
    }
    let probs = softmax_rows(conf, width);
    let mut out = Vec::new();
    for class in 1..width {
        let scored: Vec<(usize, f64)> =
            (0..a).map(|i| (i, probs[i * width + class] as f64)).filter(|&(_, s)| s > score_thresh).collect();
        let scores: Vec<f64> = scored.iter().map(|s| s.1).collect();
        for idx in by_score(&scores).into_iter().take(top_k) {
            let (i, score) = scored[idx];
            let off = [loc[i * 4] as f64, loc[i * 4 + 1] as f64, loc[i * 4 + 2] as f64, loc[i * 4 + 3] as f64];
            let Some(bbox) = decode(&off, &anchors.boxes()[i], Variances::default())?.clipped() else { continue };
            out.push(Detection { image_id, class: class - 1, score, bbox });
        }
    }
    Ok(out)
}

/// Greedy suppression for detections of a single class: repeatedly keep the
/// best remaining detection (ties to the lower index) and drop every other
/// with IoU above `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    let order = by_score(&scores);
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    /// Candidates per class entering suppression.
    pub top_k: usize,
    /// Detections kept per image after suppression.
    pub keep_top_k: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { score_thresh: 0.01, nms_iou: 0.45, top_k: 200, keep_top_k: 200 }
    }
}

/// Score threshold for visual dumps.
pub const DUMP_SCORE_THRESH: f64 = 0.6;

/// Decode, per-class NMS and a final per-image cap, best first.
pub fn postprocess(
    conf: &[f32],
    loc: &[f32],
    anchors: &AnchorSet,
    num_classes: usize,
    cfg: &DetectConfig,
    image_id: usize,
) -> Result<Vec<Detection>, EvalError> {
    let candidates = decode_predictions(conf, loc, anchors, num_classes, cfg.score_thresh, cfg.top_k, image_id)?;
    let mut kept = Vec::new();
    for class in 0..num_classes {
        let of_class: Vec<Detection> = candidates.iter().filter(|d| d.class == class).copied().collect();
        kept.extend(nms(&of_class, cfg.nms_iou));
    }
    let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
    Ok(by_score(&scores).into_iter().take(cfg.keep_top_k).map(|i| kept[i]).collect())
}

pub fn detections_jsonl(dets: &[Detection]) -> String {
    dets.iter().map(|d| serde_json::to_string(d).expect("detection serializes") + "\n").collect()
}
