//! Brute-force references shared by the property and acceptance tests.
#![allow(dead_code)]

use essd_core::anchors::{iou, BBox, GroundTruth};
use essd_core::eval::{Detection, GtBox};

/// Repeatedly take the best remaining detection and drop its overlaps.
pub fn nms_reference(dets: &[Detection], t: f64) -> Vec<Detection> {
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = remaining[0];
        for &i in &remaining {
            if dets[i].score > dets[best].score || (dets[i].score == dets[best].score && i < best) {
                best = i;
            }
        }
        kept.push(dets[best]);
        remaining.retain(|&i| i != best && iou(&dets[i].bbox, &dets[best].bbox) <= t);
    }
    kept
}

/// Greedy TP assignment and precision/recall tabulated independently.
pub fn ap_reference(dets: &[Detection], gts: &[GtBox], t: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0.0, 0.0);
    for i in order {
        seen += 1.0;
        let candidates: Vec<(usize, f64)> =
            (0..gts.len()).filter(|&j| !taken[j] && gts[j].image_id == dets[i].image_id).map(|j| (j, iou(&dets[i].bbox, &gts[j].bbox))).collect();
        let best = candidates.iter().fold(None::<(usize, f64)>, |acc, &c| match acc {
            Some(a) if a.1 >= c.1 => Some(a),
            _ => Some(c),
        });
        if let Some((j, o)) = best {
            if o >= t {
                taken[j] = true;
                tp += 1.0;
            }
        }
        points.push((tp / gts.len() as f64, tp / seen));
    }
    let mut total = 0.0;
    for level in 0..=10 {
        let r = level as f64 / 10.0;
        let mut best: f64 = 0.0;
        for &(rec, prec) in &points {
            if rec >= r && prec > best {
                best = prec;
            }
        }
        total += best;
    }
    total / 11.0
}

/// The matching rules spelled out literally: every ordering decision is a
/// full scan with explicit tie rules.
pub fn match_reference(anchors: &[BBox], gts: &[GroundTruth], t: f64) -> Vec<Option<usize>> {
    let mut owner: Vec<Option<usize>> = vec![None; anchors.len()];
    let mut forced = vec![false; anchors.len()];
    for (j, g) in gts.iter().enumerate() {
        let free: Vec<usize> = (0..anchors.len()).filter(|&i| !forced[i]).collect();
        if free.is_empty() {
            continue;
        }
        let top = free.iter().map(|&i| iou(&g.bbox, &anchors[i])).fold(f64::NEG_INFINITY, f64::max);
        let i = *free.iter().find(|&&i| iou(&g.bbox, &anchors[i]) == top).unwrap();
        owner[i] = Some(j);
        forced[i] = true;
    }
    for i in 0..anchors.len() {
        if forced[i] || gts.is_empty() {
            continue;
        }
        let top = gts.iter().map(|g| iou(&g.bbox, &anchors[i])).fold(f64::NEG_INFINITY, f64::max);
        if top >= t {
            owner[i] = gts.iter().position(|g| iou(&g.bbox, &anchors[i]) == top);
        }
    }
    owner
}
