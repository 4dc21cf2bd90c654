//! Geodesic point similarity and dense-pose AP.

use super::{greedy_match, threshold_grid, Detections, QualityMatrix};
use crate::error::{check_dim, invalid, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_KAPPA: f64 = 0.255;

/// A surface correspondence: body part, chart coordinates and image pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensePosePoint {
    pub part: u32,
    pub u: f64,
    pub v: f64,
    pub x: u32,
    pub y: u32,
}

impl DensePosePoint {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.u) || !(0.0..=1.0).contains(&self.v) {
            return invalid("densepose_point", format!("u, v must lie in [0, 1], got ({}, {})", self.u, self.v));
        }
        Ok(())
    }
}

/// Pairwise geodesic distances between sampled surface vertices of one part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartGeodesics {
    /// Chart coordinates `(u, v)` of each vertex.
    pub vertices: Vec<[f64; 2]>,
    /// Row-major `|vertices| × |vertices|` distances.
    pub distances: Vec<Vec<f64>>,
}

/// Per-part geodesic lookup. Points snap to their nearest vertex in UV
/// space (lowest index on ties).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeodesicTable {
    pub parts: BTreeMap<u32, PartGeodesics>,
}

impl GeodesicTable {
    pub fn validate(&self) -> Result<()> {
        for (part, g) in &self.parts {
            let n = g.vertices.len();
            if n == 0 {
                return invalid("geodesic_table", format!("part {part} has no vertices"));
            }
            check_dim("geodesic_table", "distance rows", n, g.distances.len())?;
            for (i, row) in g.distances.iter().enumerate() {
                check_dim("geodesic_table", "distance columns", n, row.len())?;
                if row.iter().any(|d| !(d.is_finite() && *d >= 0.0)) || row[i] != 0.0 {
                    return invalid(
                        "geodesic_table",
                        format!("part {part} row {i}: distances must be finite, non-negative, zero on the diagonal"),
                    );
                }
            }
        }
        Ok(())
    }

    fn nearest(g: &PartGeodesics, p: &DensePosePoint) -> usize {
        let d2 = |v: &[f64; 2]| (v[0] - p.u).powi(2) + (v[1] - p.v).powi(2);
        let mut best = 0;
        for (i, v) in g.vertices.iter().enumerate().skip(1) {
            if d2(v) < d2(&g.vertices[best]) {
                best = i;
            }
        }
        best
    }

    fn distance(&self, a: &DensePosePoint, b: &DensePosePoint) -> Result<f64> {
        if a.part != b.part {
            return Ok(f64::INFINITY);
        }
        match self.parts.get(&a.part) {
            Some(g) => Ok(g.distances[Self::nearest(g, a)][Self::nearest(g, b)]),
            None => invalid("geodesic_table", format!("no table for part {}", a.part)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceSource {
    /// Straight-line distance in UV space; points on different parts are
    /// infinitely far apart.
    #[default]
    EuclideanUv,
    Lookup(GeodesicTable),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsConfig {
    pub kappa: f64,
    pub distance: DistanceSource,
}

impl Default for GpsConfig {
    fn default() -> Self {
        Self {
            kappa: DEFAULT_KAPPA,
            distance: DistanceSource::EuclideanUv,
        }
    }
}

impl GpsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return invalid("gps_config", format!("kappa must be positive, got {}", self.kappa));
        }
        if let DistanceSource::Lookup(t) = &self.distance {
            t.validate()?;
        }
        Ok(())
    }

    pub fn distance(&self, pred: &DensePosePoint, gt: &DensePosePoint) -> Result<f64> {
        match &self.distance {
            DistanceSource::EuclideanUv if pred.part == gt.part => Ok((pred.u - gt.u).hypot(pred.v - gt.v)),
            DistanceSource::EuclideanUv => Ok(f64::INFINITY),
            DistanceSource::Lookup(t) => t.distance(pred, gt),
        }
    }
}

/// Mean Gaussian similarity over GT points. `pred[i]` is the prediction
/// paired with `gt[i]`; a missing prediction scores 0.
pub fn gps(pred: &[Option<DensePosePoint>], gt: &[DensePosePoint], cfg: &GpsConfig) -> Result<f64> {
    cfg.validate()?;
    if gt.is_empty() {
        return invalid("gps", "ground truth has no points");
    }
    check_dim("gps", "paired points", gt.len(), pred.len())?;
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        g.validate()?;
        if let Some(p) = p {
            p.validate()?;
            let d = cfg.distance(p, g)?;
            sum += (-d * d / (2.0 * cfg.kappa * cfg.kappa)).exp();
        }
    }
    Ok(sum / gt.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensePoseInstance {
    pub score: f64,
    pub bbox: [f64; 4],
    pub points: Vec<DensePosePoint>,
}

/// GPS of a predicted instance against a GT instance, pairing each GT point
/// with the first predicted point at the same pixel.
pub fn instance_gps(pred: &DensePoseInstance, gt: &DensePoseInstance, cfg: &GpsConfig) -> Result<f64> {
    let paired: Vec<Option<DensePosePoint>> = gt
        .points
        .iter()
        .map(|g| pred.points.iter().find(|p| (p.x, p.y) == (g.x, g.y)).copied())
        .collect();
    gps(&paired, &gt.points, cfg)
}

/// GPS thresholds `0.50, 0.55, ..., 0.95`.
pub fn gps_thresholds() -> Vec<f64> {
    threshold_grid(50, 5, 10)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DensePoseAp {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

impl DensePoseAp {
    fn from_detections(d: &[Detections]) -> Self {
        let aps: Vec<f64> = d.iter().map(Detections::average_precision).collect();
        Self {
            ap: aps.iter().sum::<f64>() / aps.len() as f64,
            ap50: aps[0],
            ap75: aps[5],
        }
    }
}

fn image_detections(preds: &[DensePoseInstance], gts: &[DensePoseInstance], cfg: &GpsConfig) -> Result<Vec<Detections>> {
    cfg.validate()?;
    if preds.iter().any(|p| !p.score.is_finite()) {
        return invalid("densepose_ap", "scores must be finite");
    }
    let quality = QualityMatrix::from_fn(preds.len(), gts.len(), |p, g| instance_gps(&preds[p], &gts[g], cfg))?;
    // GT instances without points are rejected even when nothing is predicted.
    if let Some(i) = gts.iter().position(|g| g.points.is_empty()) {
        return invalid("densepose_ap", format!("ground-truth instance {i} has no points"));
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    gps_thresholds()
        .into_iter()
        .map(|t| {
            let mut d = Detections::default();
            d.push_image(&scores, &greedy_match(&scores, &quality, t)?);
            Ok(d)
        })
        .collect()
}

/// Dense-pose AP of one image.
pub fn densepose_ap(preds: &[DensePoseInstance], gts: &[DensePoseInstance], cfg: &GpsConfig) -> Result<DensePoseAp> {
    Ok(DensePoseAp::from_detections(&image_detections(preds, gts, cfg)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensePosePair {
    pub id: String,
    pub preds: Vec<DensePoseInstance>,
    pub gts: Vec<DensePoseInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensePoseImageReport {
    pub id: String,
    #[serde(flatten)]
    pub ap: DensePoseAp,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensePoseReport {
    pub kappa: f64,
    pub images: Vec<DensePoseImageReport>,
    pub aggregate: DensePoseAp,
}

/// Per-image AP computed in parallel; the aggregate ranks all detections
/// jointly in input order.
pub fn evaluate_densepose(pairs: &[DensePosePair], cfg: &GpsConfig) -> Result<DensePoseReport> {
    let per_image: Vec<Vec<Detections>> = pairs
        .par_iter()
        .map(|p| image_detections(&p.preds, &p.gts, cfg))
        .collect::<Result<_>>()?;
    let mut pooled = vec![Detections::default(); gps_thresholds().len()];
    for dets in &per_image {
        for (acc, d) in pooled.iter_mut().zip(dets) {
            acc.scores.extend_from_slice(&d.scores);
            acc.true_positive.extend_from_slice(&d.true_positive);
            acc.num_gts += d.num_gts;
        }
    }
    Ok(DensePoseReport {
        kappa: cfg.kappa,
        images: pairs
            .iter()
            .zip(&per_image)
            .map(|(p, d)| DensePoseImageReport {
                id: p.id.clone(),
                ap: DensePoseAp::from_detections(d),
            })
            .collect(),
        aggregate: DensePoseAp::from_detections(&pooled),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(part: u32, u: f64, v: f64, x: u32) -> DensePosePoint {
        DensePosePoint { part, u, v, x, y: 0 }
    }

    fn instance(score: f64, points: Vec<DensePosePoint>) -> DensePoseInstance {
        DensePoseInstance {
            score,
            bbox: [0.0, 0.0, 10.0, 10.0],
            points,
        }
    }

    #[test]
    fn gps_closed_forms() {
        let cfg = GpsConfig::default();
        let g = [pt(1, 0.2, 0.2, 0)];
        assert_eq!(gps(&[Some(g[0])], &g, &cfg).unwrap(), 1.0);
        let d = cfg.kappa * (2.0 * 2f64.ln()).sqrt();
        let p = pt(1, 0.2 + d, 0.2, 0);
        assert!((gps(&[Some(p)], &g, &cfg).unwrap() - 0.5).abs() < 1e-12);
        let two = [pt(1, 0.0, 0.0, 0), pt(2, 0.0, 0.0, 1)];
        let v = gps(&[Some(two[0]), Some(pt(3, 0.0, 0.0, 1))], &two, &cfg).unwrap();
        assert_eq!(v, 0.5);
        assert_eq!(gps(&[None], &g, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn gps_rejects_bad_input() {
        let cfg = GpsConfig::default();
        assert!(gps(&[], &[], &cfg).is_err());
        let bad = GpsConfig {
            kappa: 0.0,
            ..GpsConfig::default()
        };
        assert!(gps(&[None], &[pt(1, 0.0, 0.0, 0)], &bad).is_err());
        assert!(gps(&[None], &[pt(1, 1.5, 0.0, 0)], &cfg).is_err());
    }

    #[test]
    fn lookup_snaps_to_nearest_vertex() {
        let table = GeodesicTable {
            parts: BTreeMap::from([(
                1,
                PartGeodesics {
                    vertices: vec![[0.0, 0.0], [1.0, 1.0]],
                    distances: vec![vec![0.0, 0.3], vec![0.3, 0.0]],
                },
            )]),
        };
        let cfg = GpsConfig {
            kappa: 0.3,
            distance: DistanceSource::Lookup(table),
        };
        let a = pt(1, 0.1, 0.2, 0);
        let b = pt(1, 0.9, 0.7, 0);
        assert_eq!(cfg.distance(&a, &b).unwrap(), 0.3);
        assert_eq!(cfg.distance(&a, &a).unwrap(), 0.0);
        assert!(cfg.distance(&pt(2, 0.0, 0.0, 0), &pt(2, 0.0, 0.0, 0)).is_err());
        assert_eq!(cfg.distance(&a, &pt(2, 0.0, 0.0, 0)).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ap_perfect_and_wrong() {
        let cfg = GpsConfig::default();
        let gt = instance(1.0, vec![pt(1, 0.3, 0.3, 0), pt(2, 0.6, 0.1, 1)]);
        let r = densepose_ap(std::slice::from_ref(&gt), std::slice::from_ref(&gt), &cfg).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
        let wrong = instance(0.9, vec![pt(3, 0.3, 0.3, 0), pt(2, 0.6, 0.9, 1)]);
        let r = densepose_ap(&[wrong], std::slice::from_ref(&gt), &cfg).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (0.0, 0.0, 0.0));
        assert!(densepose_ap(&[], &[instance(1.0, vec![])], &cfg).is_err());
    }
}
