//! Default boxes, overlap, ground-truth matching and offset coding.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Axis-aligned box in normalized image coordinates, center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self { cx: 0.5 * (xmin + xmax), cy: 0.5 * (ymin + ymax), w: xmax - xmin, h: ymax - ymin }
    }

    /// `[xmin, ymin, xmax, ymax]`
    pub fn corners(&self) -> [f64; 4] {
        [self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn check_extent(&self) -> Result<(), GeometryError> {
        if self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite() {
            Ok(())
        } else {
            Err(GeometryError::Degenerate { w: self.w, h: self.h })
        }
    }

    /// Positive extent and corners inside `[0, 1]` (with a rounding allowance).
    pub fn check_domain(&self) -> Result<(), GeometryError> {
        self.check_extent()?;
        for c in self.corners() {
            if !(-1e-9..=1.0 + 1e-9).contains(&c) {
                return Err(GeometryError::Domain(c));
            }
        }
        Ok(())
    }

    /// Clips to the unit square in corner form; `None` if nothing remains.
    pub fn clipped(&self) -> Option<BBox> {
        let [x0, y0, x1, y1] = self.corners();
        let (x0, y0, x1, y1) = (x0.clamp(0.0, 1.0), y0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        (x1 > x0 && y1 > y0).then(|| BBox::from_corners(x0, y0, x1, y1))
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_corners(&a.corners(), &b.corners())
}

pub fn iou_corners(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area = |c: &[f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    inter / (area(a) + area(b) - inter)
}

/// Default boxes for all scales, ordered scale-major, then row-major over
/// cells, then by aspect ratio; the same order in which head outputs are
/// flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    boxes: Vec<BBox>,
    offsets: Vec<usize>,
}

impl AnchorSet {
    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Start index of each scale, followed by the total count.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn scale(&self, s: usize) -> &[BBox] {
        &self.boxes[self.offsets[s]..self.offsets[s + 1]]
    }
}

/// Tiles boxes of side `sizes[s]` over a `grids[s]` (rows × cols) grid: one
/// box `(s·√r, s/√r)` per aspect ratio `r`, centered at `((j+0.5)/W, (i+0.5)/H)`
/// and clipped to the image.
pub fn generate_anchors(sizes: &[f64], aspect_ratios: &[Vec<f64>], grids: &[(usize, usize)]) -> Result<AnchorSet, GeometryError> {
    if sizes.len() != aspect_ratios.len() || sizes.len() != grids.len() {
        return Err(GeometryError::Config(format!(
            "{} sizes, {} ratio lists and {} grids",
            sizes.len(),
            aspect_ratios.len(),
            grids.len()
        )));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(GeometryError::Config(format!("box sizes must increase, got {sizes:?}")));
    }
    let mut boxes = Vec::new();
    let mut offsets = vec![0];
    for ((&size, ratios), &(rows, cols)) in sizes.iter().zip(aspect_ratios).zip(grids) {
        if ratios.is_empty() {
            return Err(GeometryError::Config("empty aspect ratio list".into()));
        }
        if ratios.iter().any(|&r| !(r > 0.0)) || !(size > 0.0 && size <= 1.0) {
            return Err(GeometryError::Config(format!("invalid size {size} or ratios {ratios:?}")));
        }
        for i in 0..rows {
            for j in 0..cols {
                let cx = (j as f64 + 0.5) / cols as f64;
                let cy = (i as f64 + 0.5) / rows as f64;
                for &r in ratios {
                    let b = BBox::new(cx, cy, size * r.sqrt(), size / r.sqrt());
                    boxes.push(b.clipped().expect("anchor centered inside the image"));
                }
            }
        }
        offsets.push(boxes.len());
    }
    Ok(AnchorSet { boxes, offsets })
}

/// Box-coding variances `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variances(pub [f64; 4]);

impl Default for Variances {
    fn default() -> Self {
        Variances([0.1, 0.1, 0.2, 0.2])
    }
}

/// `((gcx−acx)/aw/v0, (gcy−acy)/ah/v1, ln(gw/aw)/v2, ln(gh/ah)/v3)`
pub fn encode(gt: &BBox, anchor: &BBox, v: Variances) -> Result<[f64; 4], GeometryError> {
    gt.check_extent()?;
    anchor.check_extent()?;
    if v.0.iter().any(|&x| !(x > 0.0)) {
        return Err(GeometryError::Variance);
    }
    Ok([
        (gt.cx - anchor.cx) / anchor.w / v.0[0],
        (gt.cy - anchor.cy) / anchor.h / v.0[1],
        (gt.w / anchor.w).ln() / v.0[2],
        (gt.h / anchor.h).ln() / v.0[3],
    ])
}

/// Inverse of [`encode`].
pub fn decode(offsets: &[f64; 4], anchor: &BBox, v: Variances) -> Result<BBox, GeometryError> {
    anchor.check_extent()?;
    if v.0.iter().any(|&x| !(x > 0.0)) {
        return Err(GeometryError::Variance);
    }
    Ok(BBox {
        cx: anchor.cx + offsets[0] * v.0[0] * anchor.w,
        cy: anchor.cy + offsets[1] * v.0[1] * anchor.h,
        w: anchor.w * (offsets[2] * v.0[2]).exp(),
        h: anchor.h * (offsets[3] * v.0[3]).exp(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    /// Object class in `0..num_classes`; confidence label is `class + 1`.
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Background,
    Object { class: usize, gt: usize },
}

impl AnchorLabel {
    /// Confidence target with background at 0.
    pub fn conf_label(self) -> usize {
        match self {
            AnchorLabel::Background => 0,
            AnchorLabel::Object { class, .. } => class + 1,
        }
    }

    pub fn is_positive(self) -> bool {
        matches!(self, AnchorLabel::Object { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
    /// Encoded offsets for positives, zeros for background.
    pub loc_targets: Vec<[f64; 4]>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| l.is_positive()).count()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, l)| l.is_positive()).map(|(i, _)| i)
    }
}

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

/// Two-stage matching:
/// 1. each ground truth, in order, claims its highest-IoU anchor not yet
///    claimed (ties to the lower anchor index);
/// 2. every other anchor whose best IoU (ties to the lower gt index) reaches
///    `threshold` becomes positive for that ground truth.
pub fn match_anchors(anchors: &[BBox], gts: &[GroundTruth], threshold: f64, v: Variances) -> Result<MatchResult, GeometryError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(GeometryError::Threshold(threshold));
    }
    for a in anchors {
        a.check_domain()?;
    }
    for g in gts {
        g.bbox.check_domain()?;
    }
    let ious: Vec<Vec<f64>> = gts.iter().map(|g| anchors.iter().map(|a| iou(&g.bbox, a)).collect()).collect();
    let mut owner: Vec<Option<usize>> = vec![None; anchors.len()];

    for (j, row) in ious.iter().enumerate() {
        let mut best: Option<usize> = None;
        for (i, &v) in row.iter().enumerate() {
            if owner[i].is_none() && best.is_none_or(|b| v > row[b]) {
                best = Some(i);
            }
        }
        if let Some(i) = best {
            owner[i] = Some(j);
        }
    }
    let forced: Vec<bool> = owner.iter().map(Option::is_some).collect();
    for (i, slot) in owner.iter_mut().enumerate() {
        if forced[i] {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (j, row) in ious.iter().enumerate() {
            if best.is_none_or(|(_, v)| row[i] > v) {
                best = Some((j, row[i]));
            }
        }
        if let Some((j, v)) = best {
            if v >= threshold {
                *slot = Some(j);
            }
        }
    }

    let mut labels = Vec::with_capacity(anchors.len());
    let mut loc_targets = Vec::with_capacity(anchors.len());
    for (i, o) in owner.iter().enumerate() {
        match *o {
            Some(j) => {
                labels.push(AnchorLabel::Object { class: gts[j].class, gt: j });
                loc_targets.push(encode(&gts[j].bbox, &anchors[i], v)?);
            }
            None => {
                labels.push(AnchorLabel::Background);
                loc_targets.push([0.0; 4]);
            }
        }
    }
    Ok(MatchResult { labels, loc_targets })
}
