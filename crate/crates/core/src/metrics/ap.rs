//! Greedy instance matching and 101-point interpolated average precision.

use super::score_order;
use crate::error::{check_dim, invalid, Result};

/// Recall points `0.00, 0.01, ..., 1.00`.
pub const RECALL_POINTS: usize = 101;

/// Pairwise match quality, `quality[p][g]` for prediction `p`, ground truth `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityMatrix {
    pub num_preds: usize,
    pub num_gts: usize,
    values: Vec<f64>,
}

impl QualityMatrix {
    pub fn new(num_preds: usize, num_gts: usize, values: Vec<f64>) -> Result<Self> {
        check_dim("quality_matrix", "entries", num_preds * num_gts, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("quality_matrix", "qualities must be finite");
        }
        Ok(Self {
            num_preds,
            num_gts,
            values,
        })
    }

    pub fn from_fn(num_preds: usize, num_gts: usize, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(num_preds * num_gts);
        for p in 0..num_preds {
            for g in 0..num_gts {
                values.push(f(p, g)?);
            }
        }
        Self::new(num_preds, num_gts, values)
    }

    pub fn get(&self, p: usize, g: usize) -> f64 {
        self.values[p * self.num_gts + g]
    }
}

/// Outcome of matching one image at one threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matching {
    /// Per prediction (input order): the matched ground truth.
    pub pred_to_gt: Vec<Option<usize>>,
    /// Per ground truth: the matched prediction.
    pub gt_to_pred: Vec<Option<usize>>,
}

/// Predictions in descending score order (ties by input order) each take the
/// unmatched ground truth of highest quality (ties by lowest index), provided
/// that quality is at least `threshold`.
pub fn greedy_match(scores: &[f64], quality: &QualityMatrix, threshold: f64) -> Result<Matching> {
    check_dim("greedy_match", "predictions", quality.num_preds, scores.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return invalid("greedy_match", "scores must be finite");
    }
    let mut m = Matching {
        pred_to_gt: vec![None; quality.num_preds],
        gt_to_pred: vec![None; quality.num_gts],
    };
    for p in score_order(scores) {
        let mut best: Option<(usize, f64)> = None;
        for g in (0..quality.num_gts).filter(|&g| m.gt_to_pred[g].is_none()) {
            let q = quality.get(p, g);
            if best.is_none_or(|(_, b)| q > b) {
                best = Some((g, q));
            }
        }
        if let Some((g, q)) = best {
            if q >= threshold {
                m.pred_to_gt[p] = Some(g);
                m.gt_to_pred[g] = Some(p);
            }
        }
    }
    Ok(m)
}

/// Scored detections from any number of images, ready for a PR curve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Detections {
    pub scores: Vec<f64>,
    pub true_positive: Vec<bool>,
    pub num_gts: usize,
}

impl Detections {
    pub fn push_image(&mut self, scores: &[f64], m: &Matching) {
        self.scores.extend_from_slice(scores);
        self.true_positive.extend(m.pred_to_gt.iter().map(Option::is_some));
        self.num_gts += m.gt_to_pred.len();
    }

    /// COCO-style AP: precision made monotone from the right, sampled at 101
    /// recall points. No ground truth gives 1 with no detections, else 0.
    pub fn average_precision(&self) -> f64 {
        if self.num_gts == 0 {
            return if self.scores.is_empty() { 1.0 } else { 0.0 };
        }
        let order = score_order(&self.scores);
        let mut tp = 0usize;
        let mut recall = Vec::with_capacity(order.len());
        let mut precision = Vec::with_capacity(order.len());
        for (rank, &i) in order.iter().enumerate() {
            tp += usize::from(self.true_positive[i]);
            recall.push(tp as f64 / self.num_gts as f64);
            precision.push(tp as f64 / (rank + 1) as f64);
        }
        for i in (1..precision.len()).rev() {
            precision[i - 1] = precision[i - 1].max(precision[i]);
        }
        let mut sum = 0.0;
        let mut rank = 0;
        for k in 0..RECALL_POINTS {
            let r = k as f64 / 100.0;
            while rank < recall.len() && recall[rank] < r {
                rank += 1;
            }
            if rank == recall.len() {
                break;
            }
            sum += precision[rank];
        }
        sum / RECALL_POINTS as f64
    }
}

/// `count` thresholds starting at `start_percent`, spaced `step_percent`
/// apart, each computed directly as a ratio so the values are exact decimals.
pub fn threshold_grid(start_percent: u32, step_percent: u32, count: u32) -> Vec<f64> {
    (0..count).map(|i| f64::from(start_percent + i * step_percent) / 100.0).collect()
}
