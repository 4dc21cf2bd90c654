//! Region-of-interest pooling: FPN level assignment, RoIAlign, P2-only
//! pooling for the parsing branch, RoI subsampling and instance-scale
//! statistics.

use crate::error::{check_dim, invalid, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Axis-aligned box in image pixels with a detection score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl RoiBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2, score };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x1, self.y1, self.x2, self.y2, self.score].iter().all(|v| v.is_finite()) {
            return invalid("box", "coordinates and score must be finite");
        }
        if self.x2 < self.x1 || self.y2 < self.y1 {
            return invalid("box", format!("inverted box {self:?}"));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return invalid("box", format!("score {} outside [0, 1]", self.score));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Clips the box to `[0, width] × [0, height]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        Self {
            x1: cx(self.x1),
            y1: cy(self.y1),
            x2: cx(self.x2),
            y2: cy(self.y2),
            score: self.score,
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
            score: self.score,
        }
    }
}

/// Scale-based level assignment, `k = clamp(⌊k0 + log2(√(wh) / canonical)⌋, k_min, k_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    pub k0: i32,
    pub canonical_scale: f64,
    pub k_min: i32,
    pub k_max: i32,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            k0: 4,
            canonical_scale: 224.0,
            k_min: 2,
            k_max: 5,
        }
    }
}

pub fn fpn_assign_level(b: &RoiBox, cfg: &AssignConfig) -> Result<u8> {
    if !(cfg.k_min <= cfg.k0 && cfg.k0 <= cfg.k_max) || cfg.k_min < 0 {
        return invalid("fpn_assign_level", format!("inconsistent level bounds {cfg:?}"));
    }
    if !(cfg.canonical_scale > 0.0) {
        return invalid("fpn_assign_level", "canonical scale must be positive");
    }
    let area = b.area();
    if !(area > 0.0) {
        return invalid("fpn_assign_level", format!("box has zero area: {b:?}"));
    }
    let k = (cfg.k0 as f64 + (area.sqrt() / cfg.canonical_scale).log2()).floor();
    Ok(k.clamp(cfg.k_min as f64, cfg.k_max as f64) as u8)
}

/// Sample positions along one axis of one RoI: `(i0, i1, λ)` for each of
/// `out · sampling_ratio` samples, bin-major.
fn axis_samples(lo: f64, hi: f64, len: usize, out: usize, sampling_ratio: usize) -> Vec<(usize, usize, f64)> {
    // Continuous coordinates put pixel i's center at i + 0.5.
    let start = lo - 0.5;
    let bin = (hi - lo) / out as f64;
    let mut taps = Vec::with_capacity(out * sampling_ratio);
    for b in 0..out {
        for s in 0..sampling_ratio {
            let pos = start + bin * (b as f64 + (s as f64 + 0.5) / sampling_ratio as f64);
            let pos = pos.max(0.0);
            let i0 = (pos.floor() as usize).min(len - 1);
            taps.push(if i0 + 1 >= len {
                (len - 1, len - 1, 0.0)
            } else {
                (i0, i0 + 1, pos - i0 as f64)
            });
        }
    }
    taps
}

struct RoiGeometry {
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

fn roi_geometry(
    op: &'static str,
    shape: [usize; 4],
    b: &RoiBox,
    stride: usize,
    out: usize,
    sampling_ratio: usize,
) -> Result<RoiGeometry> {
    let [n, c, h, w] = shape;
    check_dim(op, "feature batch", 1, n)?;
    if c == 0 {
        return invalid(op, "feature map has no channels");
    }
    if h == 0 || w == 0 {
        return invalid(op, "feature map has zero spatial size");
    }
    if stride == 0 || out == 0 || sampling_ratio == 0 {
        return invalid(op, "stride, output size and sampling ratio must be positive");
    }
    b.validate()?;
    let s = stride as f64;
    let fb = RoiBox {
        x1: b.x1 / s,
        y1: b.y1 / s,
        x2: b.x2 / s,
        y2: b.y2 / s,
        score: b.score,
    }
    .clamp_to(w as f64, h as f64);
    Ok(RoiGeometry {
        ys: axis_samples(fb.y1, fb.y2, h, out, sampling_ratio),
        xs: axis_samples(fb.x1, fb.x2, w, out, sampling_ratio),
    })
}

/// RoIAlign over a `[1, c, h, w]` feature map.
///
/// The box is divided by `stride` without quantization and clipped to the
/// feature extent. Each of the `out × out` bins averages `sampling_ratio²`
/// bilinear samples taken at regular sub-bin centers.
pub fn roi_align(feature: &Tensor, b: &RoiBox, stride: usize, out: usize, sampling_ratio: usize) -> Result<Tensor> {
    let geo = roi_geometry("roi_align", feature.shape(), b, stride, out, sampling_ratio)?;
    let [_, c, _, w] = feature.shape();
    let sr = sampling_ratio;
    let count = (sr * sr) as f64;
    let mut pooled = Tensor::zeros([1, c, out, out]);
    pooled
        .data_mut()
        .par_chunks_mut(out * out)
        .enumerate()
        .for_each(|(ch, dst)| {
            let src = feature.plane(0, ch);
            for by in 0..out {
                for bx in 0..out {
                    let mut acc = 0.0;
                    for &(y0, y1, ly) in &geo.ys[by * sr..(by + 1) * sr] {
                        for &(x0, x1, lx) in &geo.xs[bx * sr..(bx + 1) * sr] {
                            let (hy, hx) = (1.0 - ly, 1.0 - lx);
                            acc += hy * hx * src[y0 * w + x0]
                                + hy * lx * src[y0 * w + x1]
                                + ly * hx * src[y1 * w + x0]
                                + ly * lx * src[y1 * w + x1];
                        }
                    }
                    dst[by * out + bx] = acc / count;
                }
            }
        });
    Ok(pooled)
}

/// Scatters `dy` back through the bilinear weights of [`roi_align`].
pub fn roi_align_backward(
    feature_shape: [usize; 4],
    b: &RoiBox,
    stride: usize,
    out: usize,
    sampling_ratio: usize,
    dy: &Tensor,
) -> Result<Tensor> {
    let geo = roi_geometry("roi_align_backward", feature_shape, b, stride, out, sampling_ratio)?;
    let [_, c, h, w] = feature_shape;
    if dy.shape() != [1, c, out, out] {
        return invalid("roi_align_backward", format!("upstream gradient must be [1, {c}, {out}, {out}]"));
    }
    let sr = sampling_ratio;
    let count = (sr * sr) as f64;
    let mut dfeature = Tensor::zeros(feature_shape);
    dfeature
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(ch, acc)| {
            let g = dy.plane(0, ch);
            for by in 0..out {
                for bx in 0..out {
                    let gv = g[by * out + bx] / count;
                    for &(y0, y1, ly) in &geo.ys[by * sr..(by + 1) * sr] {
                        for &(x0, x1, lx) in &geo.xs[bx * sr..(bx + 1) * sr] {
                            let (hy, hx) = (1.0 - ly, 1.0 - lx);
                            acc[y0 * w + x0] += gv * hy * hx;
                            acc[y0 * w + x1] += gv * hy * lx;
                            acc[y1 * w + x0] += gv * ly * hx;
                            acc[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
            }
        });
    Ok(dfeature)
}

/// Feature maps P2–P5 of one image; level `k` has stride `2^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: BTreeMap<u8, Tensor>,
}

pub const PYRAMID_LEVELS: [u8; 4] = [2, 3, 4, 5];

pub fn level_stride(level: u8) -> usize {
    1 << level
}

impl FeaturePyramid {
    /// Checks that every level is `[1, c, ⌈H/stride⌉, ⌈W/stride⌉]` with a
    /// shared channel count.
    pub fn new(image_h: usize, image_w: usize, levels: BTreeMap<u8, Tensor>) -> Result<Self> {
        let mut channels = None;
        for (&k, t) in &levels {
            if !PYRAMID_LEVELS.contains(&k) {
                return invalid("feature_pyramid", format!("unknown level P{k}"));
            }
            let s = level_stride(k);
            check_dim("feature_pyramid", "level batch", 1, t.n())?;
            check_dim("feature_pyramid", "level height", image_h.div_ceil(s), t.h())?;
            check_dim("feature_pyramid", "level width", image_w.div_ceil(s), t.w())?;
            let c = *channels.get_or_insert(t.c());
            check_dim("feature_pyramid", "level channels", c, t.c())?;
        }
        Ok(Self { levels })
    }

    pub fn level(&self, k: u8) -> Option<&Tensor> {
        self.levels.get(&k)
    }

    pub fn levels(&self) -> impl Iterator<Item = (u8, &Tensor)> {
        self.levels.iter().map(|(&k, t)| (k, t))
    }
}

/// A pooled RoI together with the pyramid level it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledRoi {
    pub level: u8,
    pub features: Tensor,
}

/// Parsing-branch pooling: every box is pooled from P2 (stride 4), whatever
/// its size. Output order follows input order.
pub fn pss_pool(pyramid: &FeaturePyramid, boxes: &[RoiBox], out: usize, sampling_ratio: usize) -> Result<Vec<PooledRoi>> {
    let Some(p2) = pyramid.level(2) else {
        return invalid("pss_pool", "feature pyramid has no P2 level");
    };
    boxes
        .par_iter()
        .map(|b| {
            Ok(PooledRoi {
                level: 2,
                features: roi_align(p2, b, level_stride(2), out, sampling_ratio)?,
            })
        })
        .collect()
}

/// Detection-branch pooling: each box is pooled from the level chosen by
/// [`fpn_assign_level`].
pub fn fpn_pool(
    pyramid: &FeaturePyramid,
    boxes: &[RoiBox],
    cfg: &AssignConfig,
    out: usize,
    sampling_ratio: usize,
) -> Result<Vec<PooledRoi>> {
    boxes
        .par_iter()
        .map(|b| {
            let level = fpn_assign_level(b, cfg)?;
            let Some(feature) = pyramid.level(level) else {
                return invalid("fpn_pool", format!("feature pyramid has no P{level} level"));
            };
            Ok(PooledRoi {
                level,
                features: roi_align(feature, b, level_stride(level), out, sampling_ratio)?,
            })
        })
        .collect()
}

/// Default cap on parsing RoIs per image.
pub const PARSING_ROI_CAP: usize = 32;

/// Keeps at most `cap` boxes, highest score first. Equal scores keep their
/// input order. The result is always in descending score order.
pub fn subsample_parsing_rois(boxes: &[RoiBox], cap: usize) -> Vec<RoiBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    order.into_iter().take(cap).map(|i| boxes[i]).collect()
}

/// How an instance's size relative to the image is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMeasure {
    /// Box area over image area.
    #[default]
    Area,
    /// Square root of the area ratio.
    SqrtArea,
}

pub fn relative_scale(b: &RoiBox, image_w: f64, image_h: f64, measure: ScaleMeasure) -> Result<f64> {
    if !(image_w > 0.0 && image_h > 0.0) {
        return invalid("relative_scale", "image dimensions must be positive");
    }
    let ratio = b.area() / (image_w * image_h);
    Ok(match measure {
        ScaleMeasure::Area => ratio,
        ScaleMeasure::SqrtArea => ratio.sqrt(),
    })
}

/// Empirical CDF of `scales` evaluated at each grid point: the fraction of
/// instances whose scale is ≤ the grid value. The grid must be strictly
/// increasing; an empty scale set yields zero everywhere.
pub fn scale_cdf(scales: &[f64], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if grid.iter().any(|g| !g.is_finite()) {
        return invalid("scale_cdf", "grid values must be finite");
    }
    if let Some(w) = grid.windows(2).find(|w| w[1] <= w[0]) {
        return invalid("scale_cdf", format!("grid must be strictly increasing, found {} then {}", w[0], w[1]));
    }
    let mut sorted = scales.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total = sorted.len();
    Ok(grid
        .iter()
        .map(|&g| {
            let below = sorted.partition_point(|&s| s <= g);
            let frac = if total == 0 { 0.0 } else { below as f64 / total as f64 };
            (g, frac)
        })
        .collect())
}
