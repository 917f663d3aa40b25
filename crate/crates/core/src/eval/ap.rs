//! Average precision for one class.

use serde::{Deserialize, Serialize};

use super::detect::{by_score, Detection};
use crate::anchors::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Mean of the interpolated precision at recall 0, 0.1, …, 1.
    #[default]
    Voc2007,
    /// Area under the interpolated precision-recall curve.
    Continuous,
}

/// A ground-truth box of the evaluated class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub image_id: usize,
    pub bbox: BBox,
}

/// True-positive flags in score order (ties to the lower index). A detection
/// is a true positive when the unmatched ground truth of its image with the
/// highest IoU reaches `iou_thresh`; that ground truth is then consumed.
pub fn assign(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> Vec<bool> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut used = vec![false; gts.len()];
    by_score(&scores)
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.image_id != d.image_id {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= iou_thresh => {
                    used[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// `(recall, precision)` after each detection in score order.
pub fn pr_curve(tp: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut hits = 0usize;
    tp.iter()
        .enumerate()
        .map(|(k, &t)| {
            hits += t as usize;
            (hits as f64 / num_gt as f64, hits as f64 / (k + 1) as f64)
        })
        .collect()
}

/// 0 when the class has no ground truth.
pub fn average_precision(dets: &[Detection], gts: &[GtBox], iou_thresh: f64, mode: ApMode) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let curve = pr_curve(&assign(dets, gts, iou_thresh), gts.len());
    match mode {
        ApMode::Voc2007 => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    curve.iter().filter(|(rec, _)| *rec >= r).map(|&(_, p)| p).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        ApMode::Continuous => {
            let mut rec = vec![0.0];
            let mut pre = vec![0.0];
            rec.extend(curve.iter().map(|c| c.0));
            pre.extend(curve.iter().map(|c| c.1));
            rec.push(1.0);
            pre.push(0.0);
            for i in (0..pre.len() - 1).rev() {
                pre[i] = pre[i].max(pre[i + 1]);
            }
            (1..rec.len()).map(|i| (rec[i] - rec[i - 1]) * pre[i]).sum()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(image_id: usize, score: f64, x: f64) -> Detection {
        Detection { image_id, class: 0, score, bbox: BBox::new(x, 0.5, 0.2, 0.2) }
    }

    fn g(image_id: usize, x: f64) -> GtBox {
        GtBox { image_id, bbox: BBox::new(x, 0.5, 0.2, 0.2) }
    }

    #[test]
    fn trivial_cases() {
        assert_eq!(average_precision(&[d(0, 0.9, 0.5)], &[g(0, 0.5)], 0.5, ApMode::Voc2007), 1.0);
        assert_eq!(average_precision(&[], &[g(0, 0.5)], 0.5, ApMode::Voc2007), 0.0);
        assert_eq!(average_precision(&[d(0, 0.9, 0.5)], &[], 0.5, ApMode::Voc2007), 0.0);
        assert_eq!(average_precision(&[d(1, 0.9, 0.5)], &[g(0, 0.5)], 0.5, ApMode::Voc2007), 0.0);
    }

    #[test]
    fn three_dets_two_gts() {
        // Scores 0.9 (TP), 0.8 (FP), 0.7 (TP): PR points (0.5, 1), (0.5, 0.5), (1, 2/3).
        let dets = [d(0, 0.8, 0.1), d(0, 0.9, 0.3), d(0, 0.7, 0.7)];
        let gts = [g(0, 0.3), g(0, 0.7)];
        assert_eq!(assign(&dets, &gts, 0.5), vec![true, false, true]);
        let ap = average_precision(&dets, &gts, 0.5, ApMode::Voc2007);
        let expected = (6.0 * 1.0 + 5.0 * (2.0 / 3.0)) / 11.0;
        assert!((ap - expected).abs() < 1e-12, "{ap}");
        let area = average_precision(&dets, &gts, 0.5, ApMode::Continuous);
        assert!((area - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12, "{area}");
    }

    #[test]
    fn duplicates_are_false_positives() {
        let gts = [g(0, 0.5)];
        let dets = [d(0, 0.9, 0.5), d(0, 0.8, 0.5)];
        assert_eq!(assign(&dets, &gts, 0.5), vec![true, false]);
        assert_eq!(average_precision(&dets, &gts, 0.5, ApMode::Voc2007), 1.0);
    }
}
