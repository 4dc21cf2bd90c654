//! Instance-level part metrics: per-instance part IoU, AP^p and PCP.
//!
//! Instance-to-instance comparisons happen in the shared, unclipped image
//! frame; pixels ignored on either side are skipped.

use super::{greedy_match, paste_multi_person, threshold_grid, Confusion, Detections, InstanceParsing, QualityMatrix, IGNORE};
use crate::error::{invalid, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Matching threshold for PCP and the headline AP^p.
pub const PCP_THRESHOLD: f64 = 0.5;

/// AP^p_vol thresholds `0.1, 0.2, ..., 0.9`.
pub fn ap_vol_thresholds() -> Vec<f64> {
    threshold_grid(10, 10, 9)
}

/// Per-label pixel counts between two instances.
struct PartCounts {
    inter: Vec<u64>,
    pred: Vec<u64>,
    gt: Vec<u64>,
}

impl PartCounts {
    fn new(pred: &InstanceParsing, gt: &InstanceParsing, num_classes: usize) -> Self {
        let mut c = Self {
            inter: vec![0; num_classes],
            pred: vec![0; num_classes],
            gt: vec![0; num_classes],
        };
        let (a, b) = (pred.extent(), gt.extent());
        let (x0, y0, x1, y1) = (a.0.min(b.0), a.1.min(b.1), a.2.max(b.2), a.3.max(b.3));
        for y in y0..y1 {
            for x in x0..x1 {
                let (p, g) = (pred.label_at(x, y), gt.label_at(x, y));
                if p == IGNORE || g == IGNORE {
                    continue;
                }
                let (p, g) = (usize::from(p), usize::from(g));
                c.pred[p] += 1;
                c.gt[g] += 1;
                if p == g {
                    c.inter[p] += 1;
                }
            }
        }
        c
    }

    /// IoU of part `k`, `None` when absent from both.
    fn iou(&self, k: usize) -> Option<f64> {
        let union = self.pred[k] + self.gt[k] - self.inter[k];
        (union > 0).then(|| self.inter[k] as f64 / union as f64)
    }

    fn parts(&self) -> std::ops::Range<usize> {
        1..self.inter.len()
    }
}

fn validate_all(instances: &[InstanceParsing], num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return invalid("parsing_metrics", "num_classes must be at least 2 (background plus one part)");
    }
    instances.iter().try_for_each(|i| i.validate(num_classes))
}

/// Mean part IoU over parts present in either instance; 0 when neither has
/// any part pixels.
pub fn app_score(pred: &InstanceParsing, gt: &InstanceParsing, num_classes: usize) -> Result<f64> {
    validate_all(std::slice::from_ref(pred), num_classes)?;
    validate_all(std::slice::from_ref(gt), num_classes)?;
    Ok(app_from_counts(&PartCounts::new(pred, gt, num_classes)))
}

fn app_from_counts(c: &PartCounts) -> f64 {
    let ious: Vec<f64> = c.parts().filter_map(|k| c.iou(k)).collect();
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// `(correct parts, GT parts)` for one ground truth against its match.
fn pcp_counts(pred: Option<&InstanceParsing>, gt: &InstanceParsing, num_classes: usize) -> (usize, usize) {
    let empty;
    let pred = match pred {
        Some(p) => p,
        None => {
            empty = InstanceParsing {
                labels: super::LabelGrid {
                    width: 1,
                    height: 1,
                    labels: vec![0],
                },
                score: 0.0,
                bbox: gt.bbox,
            };
            &empty
        }
    };
    let c = PartCounts::new(pred, gt, num_classes);
    let gt_parts: Vec<usize> = c.parts().filter(|&k| c.gt[k] > 0).collect();
    let correct = gt_parts.iter().filter(|&&k| c.iou(k).is_some_and(|v| v > 0.5)).count();
    (correct, gt_parts.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcpMode {
    /// Correct parts over GT parts, pooled over every GT instance.
    #[default]
    Global,
    /// Mean of per-instance fractions over GT instances with parts.
    PerInstanceMean,
}

/// Matching and part statistics of one image, threshold-independent.
struct ImageInstances<'a> {
    preds: &'a [InstanceParsing],
    gts: &'a [InstanceParsing],
    scores: Vec<f64>,
    quality: QualityMatrix,
}

impl<'a> ImageInstances<'a> {
    fn new(preds: &'a [InstanceParsing], gts: &'a [InstanceParsing], num_classes: usize) -> Result<Self> {
        validate_all(preds, num_classes)?;
        validate_all(gts, num_classes)?;
        let quality = QualityMatrix::from_fn(preds.len(), gts.len(), |p, g| {
            Ok(app_from_counts(&PartCounts::new(&preds[p], &gts[g], num_classes)))
        })?;
        Ok(Self {
            preds,
            gts,
            scores: preds.iter().map(|p| p.score).collect(),
            quality,
        })
    }

    fn detections(&self, threshold: f64, into: &mut Detections) -> Result<()> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return invalid("ap_p", format!("threshold must lie in (0, 1), got {threshold}"));
        }
        let m = greedy_match(&self.scores, &self.quality, threshold)?;
        into.push_image(&self.scores, &m);
        Ok(())
    }

    /// Per GT instance `(correct, parts)` after matching at 0.5.
    fn pcp(&self, num_classes: usize) -> Result<Vec<(usize, usize)>> {
        let m = greedy_match(&self.scores, &self.quality, PCP_THRESHOLD)?;
        Ok(self
            .gts
            .iter()
            .zip(&m.gt_to_pred)
            .map(|(gt, p)| pcp_counts(p.map(|p| &self.preds[p]), gt, num_classes))
            .collect())
    }
}

fn pcp_reduce(per_gt: &[(usize, usize)], mode: PcpMode) -> Result<f64> {
    let with_parts: Vec<&(usize, usize)> = per_gt.iter().filter(|c| c.1 > 0).collect();
    if with_parts.is_empty() {
        return invalid("pcp50", "ground truth has no part pixels");
    }
    Ok(match mode {
        PcpMode::Global => {
            let correct: usize = with_parts.iter().map(|c| c.0).sum();
            let total: usize = with_parts.iter().map(|c| c.1).sum();
            correct as f64 / total as f64
        }
        PcpMode::PerInstanceMean => {
            with_parts.iter().map(|c| c.0 as f64 / c.1 as f64).sum::<f64>() / with_parts.len() as f64
        }
    })
}

/// AP^p of one image at a single part-IoU threshold.
pub fn ap_p(preds: &[InstanceParsing], gts: &[InstanceParsing], num_classes: usize, threshold: f64) -> Result<f64> {
    let img = ImageInstances::new(preds, gts, num_classes)?;
    let mut d = Detections::default();
    img.detections(threshold, &mut d)?;
    Ok(d.average_precision())
}

/// Mean AP^p over thresholds 0.1 to 0.9.
pub fn ap_p_vol(preds: &[InstanceParsing], gts: &[InstanceParsing], num_classes: usize) -> Result<f64> {
    let img = ImageInstances::new(preds, gts, num_classes)?;
    let thresholds = ap_vol_thresholds();
    let mut sum = 0.0;
    for &t in &thresholds {
        let mut d = Detections::default();
        img.detections(t, &mut d)?;
        sum += d.average_precision();
    }
    Ok(sum / thresholds.len() as f64)
}

/// Fraction of GT parts with IoU above 0.5 against the matched prediction.
pub fn pcp50(preds: &[InstanceParsing], gts: &[InstanceParsing], num_classes: usize, mode: PcpMode) -> Result<f64> {
    pcp_reduce(&ImageInstances::new(preds, gts, num_classes)?.pcp(num_classes)?, mode)
}

/// Predictions and ground truth for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsingPair {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub preds: Vec<InstanceParsing>,
    pub gts: Vec<InstanceParsing>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParsingImageReport {
    pub id: String,
    pub miou: Option<f64>,
    pub ap_p_50: f64,
    pub ap_p_vol: f64,
    /// `None` when the image has no GT part pixels.
    pub pcp_50: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParsingAggregate {
    pub miou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub ap_p_50: f64,
    pub ap_p_vol: f64,
    pub pcp_50: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParsingReport {
    pub num_classes: usize,
    pub pcp_mode: PcpMode,
    pub images: Vec<ParsingImageReport>,
    pub aggregate: ParsingAggregate,
}

struct ImageResult {
    report: ParsingImageReport,
    confusion: Confusion,
    detections: Vec<Detections>,
    pcp: Vec<(usize, usize)>,
}

fn evaluate_image(pair: &ParsingPair, num_classes: usize, mode: PcpMode) -> Result<ImageResult> {
    let pred_map = paste_multi_person(&pair.preds, pair.width, pair.height)?;
    let gt_map = paste_multi_person(&pair.gts, pair.width, pair.height)?;
    let mut confusion = Confusion::new(num_classes);
    confusion.accumulate(&pred_map, &gt_map)?;

    let img = ImageInstances::new(&pair.preds, &pair.gts, num_classes)?;
    let mut detections = Vec::new();
    for t in ap_vol_thresholds() {
        let mut d = Detections::default();
        img.detections(t, &mut d)?;
        detections.push(d);
    }
    let aps: Vec<f64> = detections.iter().map(Detections::average_precision).collect();
    let pcp = img.pcp(num_classes)?;
    Ok(ImageResult {
        report: ParsingImageReport {
            id: pair.id.clone(),
            miou: confusion.iou().mean,
            ap_p_50: aps[4],
            ap_p_vol: aps.iter().sum::<f64>() / aps.len() as f64,
            pcp_50: pcp_reduce(&pcp, mode).ok(),
        },
        confusion,
        detections,
        pcp,
    })
}

/// Evaluates every image independently (in parallel), then pools in input
/// order: confusion matrices are summed, detections are ranked jointly and
/// PCP counts are pooled.
pub fn evaluate_parsing(pairs: &[ParsingPair], num_classes: usize, mode: PcpMode) -> Result<ParsingReport> {
    let results: Vec<ImageResult> = pairs
        .par_iter()
        .map(|p| evaluate_image(p, num_classes, mode))
        .collect::<Result<_>>()?;

    let mut confusion = Confusion::new(num_classes);
    let mut pooled: Vec<Detections> = vec![Detections::default(); ap_vol_thresholds().len()];
    let mut pcp = Vec::new();
    for r in &results {
        confusion.merge(&r.confusion)?;
        for (acc, d) in pooled.iter_mut().zip(&r.detections) {
            acc.scores.extend_from_slice(&d.scores);
            acc.true_positive.extend_from_slice(&d.true_positive);
            acc.num_gts += d.num_gts;
        }
        pcp.extend_from_slice(&r.pcp);
    }
    let aps: Vec<f64> = pooled.iter().map(Detections::average_precision).collect();
    let iou = confusion.iou();
    Ok(ParsingReport {
        num_classes,
        pcp_mode: mode,
        aggregate: ParsingAggregate {
            miou: iou.mean,
            per_class_iou: iou.per_class,
            ap_p_50: aps[4],
            ap_p_vol: aps.iter().sum::<f64>() / aps.len() as f64,
            pcp_50: pcp_reduce(&pcp, mode)?,
        },
        images: results.into_iter().map(|r| r.report).collect(),
    })
}
