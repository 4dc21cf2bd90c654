//! Evaluation for instance-level human parsing and dense pose.

mod ap;
mod densepose;
mod parsing;

pub use ap::*;
pub use densepose::*;
pub use parsing::*;

use crate::error::{check_dim, invalid, Result};
use serde::{Deserialize, Serialize};

/// Label value excluded from every metric.
pub const IGNORE: u16 = 255;

/// Row-major 2-D label map. 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
}

impl LabelGrid {
    pub fn new(width: usize, height: usize, labels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid("label_grid", "dimensions must be positive");
        }
        check_dim("label_grid", "label count", width * height, labels.len())?;
        Ok(Self { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, value: u16) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds a grid from rows; all rows must have the same length.
    pub fn from_rows(rows: &[Vec<u16>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return invalid("label_grid", "ragged rows");
        }
        Self::new(width, rows.len(), rows.concat())
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Every label must be a class below `num_classes` or [`IGNORE`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        check_dim("label_grid", "label count", self.width * self.height, self.labels.len())?;
        if self.width == 0 || self.height == 0 {
            return invalid("label_grid", "dimensions must be positive");
        }
        match self.labels.iter().find(|&&l| l != IGNORE && usize::from(l) >= num_classes) {
            Some(l) => invalid("label_grid", format!("label {l} outside 0..{num_classes} and not {IGNORE}")),
            None => Ok(()),
        }
    }
}

/// One person instance: a part-label grid placed in the image with its
/// top-left cell at `(⌊x1⌋, ⌊y1⌋)` of `bbox`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceParsing {
    pub labels: LabelGrid,
    pub score: f64,
    /// `[x1, y1, x2, y2]` in image pixels.
    pub bbox: [f64; 4],
}

impl InstanceParsing {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !self.score.is_finite() || !self.bbox.iter().all(|v| v.is_finite()) {
            return invalid("instance", "score and box must be finite");
        }
        if self.bbox[2] < self.bbox[0] || self.bbox[3] < self.bbox[1] {
            return invalid("instance", format!("inverted box {:?}", self.bbox));
        }
        self.labels.validate(num_classes)
    }

    fn origin(&self) -> (i64, i64) {
        (self.bbox[0].floor() as i64, self.bbox[1].floor() as i64)
    }

    /// Image-frame rectangle `[x0, x1) × [y0, y1)` covered by the grid,
    /// clipped to the image. Empty when fully outside.
    fn footprint(&self, width: usize, height: usize) -> Rect {
        let (ox, oy) = self.origin();
        let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
        Rect {
            x0: clip(ox, width),
            y0: clip(oy, height),
            x1: clip(ox + self.labels.width as i64, width),
            y1: clip(oy + self.labels.height as i64, height),
        }
    }

    /// Unclipped `(x0, y0, x1, y1)` extent in image coordinates.
    fn extent(&self) -> (i64, i64, i64, i64) {
        let (ox, oy) = self.origin();
        (ox, oy, ox + self.labels.width as i64, oy + self.labels.height as i64)
    }

    /// Label at image pixel `(x, y)`, 0 outside the grid.
    fn label_at(&self, x: i64, y: i64) -> u16 {
        let (ox, oy) = self.origin();
        let (gx, gy) = (x - ox, y - oy);
        if gx < 0 || gy < 0 || gx >= self.labels.width as i64 || gy >= self.labels.height as i64 {
            0
        } else {
            self.labels.get(gx as usize, gy as usize)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn pixels(self) -> impl Iterator<Item = (usize, usize)> {
        (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| (x, y)))
    }
}

/// Instance indices by descending score; equal scores keep input order.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Merges instances into one semantic map. Higher-scoring instances claim
/// pixels first; any non-zero label (including [`IGNORE`]) claims a pixel.
/// Grids are clipped to the image.
pub fn paste_multi_person(instances: &[InstanceParsing], width: usize, height: usize) -> Result<LabelGrid> {
    let mut out = LabelGrid::filled(width, height, 0)?;
    let scores: Vec<f64> = instances.iter().map(|i| i.score).collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return invalid("paste_multi_person", "scores must be finite");
    }
    for idx in score_order(&scores) {
        let inst = &instances[idx];
        for (x, y) in inst.footprint(width, height).pixels() {
            let cell = &mut out.labels[y * width + x];
            if *cell == 0 {
                *cell = inst.label_at(x as i64, y as i64);
            }
        }
    }
    Ok(out)
}

/// Accumulated `num_classes × num_classes` confusion counts, rows = ground
/// truth, columns = prediction. Pixels ignored on either side are skipped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn accumulate(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
        check_dim("miou", "width", gt.width, pred.width)?;
        check_dim("miou", "height", gt.height, pred.height)?;
        pred.validate(self.num_classes)?;
        gt.validate(self.num_classes)?;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if p != IGNORE && g != IGNORE {
                self.counts[usize::from(g) * self.num_classes + usize::from(p)] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        check_dim("confusion", "classes", self.num_classes, other.num_classes)?;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn iou(&self) -> MiouReport {
        let c = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let gt: u64 = self.counts[k * c..(k + 1) * c].iter().sum();
                let pred: u64 = (0..c).map(|g| self.counts[g * c + k]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        MiouReport { per_class, mean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiouReport {
    /// `None` for classes absent from both maps.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with a non-empty union; `None` when every pixel is ignored.
    pub mean: Option<f64>,
}

pub fn miou(pred: &LabelGrid, gt: &LabelGrid, num_classes: usize) -> Result<MiouReport> {
    if num_classes == 0 {
        return invalid("miou", "num_classes must be positive");
    }
    let mut cm = Confusion::new(num_classes);
    cm.accumulate(pred, gt)?;
    Ok(cm.iou())
}
