//! Multibox objective: softmax confidence loss over positives and mined hard
//! negatives plus smooth-L1 localization loss over positives.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::anchors::MatchResult;
use crate::autograd::{Tape, Var};
use crate::error::TensorError;
use crate::ops;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiboxConfig {
    pub neg_pos_ratio: f64,
    pub alpha: f64,
    /// Negatives kept for an image without positives.
    pub empty_negatives: usize,
}

impl Default for MultiboxConfig {
    fn default() -> Self {
        Self { neg_pos_ratio: 3.0, alpha: 1.0, empty_negatives: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub conf_pos: f64,
    pub conf_neg: f64,
    pub loc: f64,
    pub num_pos: usize,
    pub num_mined_neg: usize,
}

/// Background anchors ranked by background cross-entropy, highest first
/// (ties to the lower index), truncated to `k`.
///
/// `conf` holds one image's `A × width` logits.
pub fn mine_negatives<T: Scalar>(conf: &[T], width: usize, matches: &MatchResult, k: usize) -> Vec<usize> {
    let mut candidates: Vec<(usize, f64)> = matches
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_positive())
        .map(|(a, _)| (a, ops::cross_entropy_row(&conf[a * width..(a + 1) * width], 0).to_f64_lossy()))
        .collect();
    candidates.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap_or(Ordering::Equal).then(x.0.cmp(&y.0)));
    candidates.truncate(k);
    candidates.into_iter().map(|(a, _)| a).collect()
}

/// Number of negatives to keep for an image with `num_pos` positives.
pub fn negative_quota(num_pos: usize, num_anchors: usize, cfg: &MultiboxConfig) -> usize {
    if num_pos == 0 {
        cfg.empty_negatives.min(num_anchors)
    } else {
        ((cfg.neg_pos_ratio * num_pos as f64).floor() as usize).min(num_anchors - num_pos)
    }
}

/// Records the multibox loss for a batch on `tape`.
///
/// `conf` is `N×A×(C+1)` (or `A×(C+1)` for one image), `loc` likewise with
/// width 4, and `matches` holds one result per image. Negatives are mined per
/// image; the sum is normalized by the total number of positives (at least 1).
pub fn multibox_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    conf: Var,
    loc: Var,
    matches: &[MatchResult],
    cfg: &MultiboxConfig,
) -> Result<(Var, LossBreakdown), TensorError> {
    let conf_value = tape.value(conf);
    let width = *conf_value.shape().last().ok_or(TensorError::Empty("multibox"))?;
    let rows = conf_value.len() / width.max(1);
    if matches.is_empty() || !rows.is_multiple_of(matches.len()) {
        return Err(TensorError::Shape { op: "multibox", detail: format!("{rows} conf rows for {} images", matches.len()) });
    }
    let anchors = rows / matches.len();
    if tape.value(loc).len() != rows * 4 {
        return Err(TensorError::Shape {
            op: "multibox",
            detail: format!("loc holds {} values, expected {rows}×4", tape.value(loc).len()),
        });
    }

    let mut pos_targets = Vec::new();
    let mut neg_targets = Vec::new();
    let mut loc_rows = Vec::new();
    let mut loc_target = Vec::new();
    for (n, m) in matches.iter().enumerate() {
        if m.labels.len() != anchors {
            return Err(TensorError::Shape {
                op: "multibox",
                detail: format!("image {n}: {} match labels for {anchors} anchors", m.labels.len()),
            });
        }
        let base = n * anchors;
        for a in m.positives() {
            pos_targets.push((base + a, m.labels[a].conf_label()));
            loc_rows.push(base + a);
            loc_target.extend(m.loc_targets[a].iter().map(|&v| T::from_f64_lossy(v)));
        }
        let k = negative_quota(m.num_positive(), anchors, cfg);
        let image_conf = &tape.value(conf).data()[base * width..(base + anchors) * width];
        neg_targets.extend(mine_negatives(image_conf, width, m, k).into_iter().map(|a| (base + a, 0)));
    }

    let num_pos = pos_targets.len();
    let num_mined_neg = neg_targets.len();
    let conf_pos = tape.cross_entropy_sum(conf, &pos_targets)?;
    let conf_neg = tape.cross_entropy_sum(conf, &neg_targets)?;
    let loc_loss = if loc_rows.is_empty() {
        tape.constant(Tensor::scalar(T::zero()))
    } else {
        let loc_target = Tensor::new(&[loc_rows.len(), 4], loc_target)?;
        tape.smooth_l1_sum(loc, &loc_target, &loc_rows)?
    };

    let conf_sum = tape.add(conf_pos, conf_neg)?;
    let weighted_loc = tape.scale(loc_loss, T::from_f64_lossy(cfg.alpha));
    let sum = tape.add(conf_sum, weighted_loc)?;
    let total = tape.scale(sum, T::one() / T::from_usize(num_pos.max(1)).unwrap());

    let scalar = |v: Var| tape.value(v).data()[0].to_f64_lossy();
    let breakdown = LossBreakdown {
        total: scalar(total),
        conf_pos: scalar(conf_pos),
        conf_neg: scalar(conf_neg),
        loc: scalar(loc_loss),
        num_pos,
        num_mined_neg,
    };
    Ok((total, breakdown))
}

/// Loss value for one image's `A×(C+1)` confidences and `A×4` offsets.
pub fn multibox<T: Scalar>(conf: &Tensor<T>, loc: &Tensor<T>, matches: &MatchResult, cfg: &MultiboxConfig) -> Result<LossBreakdown, TensorError> {
    let mut tape = Tape::new();
    let c = tape.constant(conf.clone());
    let l = tape.constant(loc.clone());
    multibox_on_tape(&mut tape, c, l, std::slice::from_ref(matches), cfg).map(|(_, b)| b)
}
