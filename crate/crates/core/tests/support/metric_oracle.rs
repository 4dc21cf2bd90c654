//! Brute-force metric oracles and random scene generators, written from the
//! metric definitions independently of the library implementation.

#![allow(dead_code)]

use prcnn_core::metrics::*;
use prcnn_core::params::seeded_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::{BTreeSet, HashMap};

pub fn miou_oracle(pred: &[u16], gt: &[u16], num_classes: u16) -> Option<f64> {
    let mut ious = Vec::new();
    for k in 0..num_classes {
        let mut inter = 0u32;
        let mut union = 0u32;
        for (&p, &g) in pred.iter().zip(gt) {
            if p == IGNORE || g == IGNORE {
                continue;
            }
            if p == k && g == k {
                inter += 1;
            }
            if p == k || g == k {
                union += 1;
            }
        }
        if union > 0 {
            ious.push(f64::from(inter) / f64::from(union));
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn check_miou_pair(w: usize, h: usize, pred: &[u16], gt: &[u16]) {
    let p = LabelGrid::new(w, h, pred.to_vec()).unwrap();
    let g = LabelGrid::new(w, h, gt.to_vec()).unwrap();
    let got = miou(&p, &g, 3).unwrap().mean;
    let want = miou_oracle(pred, gt, 3);
    match (got, want) {
        (Some(a), Some(b)) => assert!((a - b).abs() < 1e-15, "{pred:?} vs {gt:?}: {a} != {b}"),
        _ => panic!("{pred:?} vs {gt:?}: {got:?} vs {want:?}"),
    }
    let swapped = miou(&g, &p, 3).unwrap().mean;
    assert_eq!(swapped, got);
}

/// Decodes `code` as `len` base-3 digits.
pub fn ternary(mut code: u64, len: usize, out: &mut [u16]) {
    for v in out.iter_mut().take(len) {
        *v = (code % 3) as u16;
        code /= 3;
    }
}

pub fn compositions(n: usize, k: usize, prefix: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if k == 1 {
        prefix.push(n);
        f(prefix);
        prefix.pop();
        return;
    }
    for first in 0..=n {
        prefix.push(first);
        compositions(n - first, k - 1, prefix, f);
        prefix.pop();
    }
}

pub type PixelMap = HashMap<(i64, i64), u16>;

pub fn pixel_map(inst: &InstanceParsing) -> PixelMap {
    let ox = inst.bbox[0].floor() as i64;
    let oy = inst.bbox[1].floor() as i64;
    let mut m = HashMap::new();
    for y in 0..inst.labels.height {
        for x in 0..inst.labels.width {
            m.insert((ox + x as i64, oy + y as i64), inst.labels.labels[y * inst.labels.width + x]);
        }
    }
    m
}

pub fn label(m: &PixelMap, px: &(i64, i64)) -> u16 {
    m.get(px).copied().unwrap_or(0)
}

/// Per-part IoU between two instances, `None` for parts absent from both.
pub fn part_ious(pred: &PixelMap, gt: &PixelMap, num_classes: u16) -> Vec<(u16, usize, Option<f64>)> {
    let support: BTreeSet<(i64, i64)> = pred.keys().chain(gt.keys()).copied().collect();
    (1..num_classes)
        .map(|k| {
            let valid = |px: &&(i64, i64)| label(pred, px) != IGNORE && label(gt, px) != IGNORE;
            let p: BTreeSet<_> = support.iter().filter(valid).filter(|px| label(pred, px) == k).collect();
            let g: BTreeSet<_> = support.iter().filter(valid).filter(|px| label(gt, px) == k).collect();
            let union = p.union(&g).count();
            let inter = p.intersection(&g).count();
            (k, g.len(), (union > 0).then(|| inter as f64 / union as f64))
        })
        .collect()
}

pub fn app_oracle(pred: &PixelMap, gt: &PixelMap, num_classes: u16) -> f64 {
    let present: Vec<f64> = part_ious(pred, gt, num_classes).into_iter().filter_map(|t| t.2).collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Greedy matching written from the rule: highest score first (earlier input
/// wins ties), each takes the best remaining GT (lowest index on ties) if its
/// quality reaches the threshold.
pub fn match_oracle(scores: &[f64], q: &[Vec<f64>], threshold: f64) -> Vec<Option<usize>> {
    let mut order: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut free: BTreeSet<usize> = (0..q.first().map_or(0, Vec::len)).collect();
    let mut out = vec![None; scores.len()];
    for (_, p) in order {
        let best = free.iter().copied().fold(None, |acc: Option<usize>, g| match acc {
            Some(b) if q[p][b] >= q[p][g] => Some(b),
            _ => Some(g),
        });
        if let Some(g) = best.filter(|&g| q[p][g] >= threshold) {
            free.remove(&g);
            out[p] = Some(g);
        }
    }
    out
}

/// AP from the ranked list: at each recall level k/100, the best precision
/// among ranks whose recall reaches it.
pub fn ap_oracle(scores: &[f64], tp: &[bool], num_gts: usize) -> f64 {
    if num_gts == 0 {
        return if scores.is_empty() { 1.0 } else { 0.0 };
    }
    let mut ranked: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut hits = 0usize;
    let curve: Vec<(usize, f64)> = ranked
        .iter()
        .enumerate()
        .map(|(rank, &(_, i))| {
            hits += usize::from(tp[i]);
            (hits, hits as f64 / (rank + 1) as f64)
        })
        .collect();
    let mut sum = 0.0;
    for k in 0..=100usize {
        let best = curve
            .iter()
            .filter(|(hits, _)| hits * 100 >= k * num_gts)
            .map(|c| c.1)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}

pub fn quality_oracle(preds: &[InstanceParsing], gts: &[InstanceParsing], num_classes: u16) -> Vec<Vec<f64>> {
    let gm: Vec<PixelMap> = gts.iter().map(pixel_map).collect();
    preds
        .iter()
        .map(|p| {
            let pm = pixel_map(p);
            gm.iter().map(|g| app_oracle(&pm, g, num_classes)).collect()
        })
        .collect()
}

pub fn ap_p_oracle(preds: &[InstanceParsing], gts: &[InstanceParsing], num_classes: u16, t: f64) -> f64 {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let q = quality_oracle(preds, gts, num_classes);
    let m = match_oracle(&scores, &q, t);
    let tp: Vec<bool> = m.iter().map(Option::is_some).collect();
    ap_oracle(&scores, &tp, gts.len())
}

pub fn pcp_oracle(preds: &[InstanceParsing], gts: &[InstanceParsing], num_classes: u16, mode: PcpMode) -> Option<f64> {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let q = quality_oracle(preds, gts, num_classes);
    let m = match_oracle(&scores, &q, 0.5);
    let mut per_gt = Vec::new();
    for (gi, gt) in gts.iter().enumerate() {
        let gm = pixel_map(gt);
        let pm = match m.iter().position(|&x| x == Some(gi)) {
            Some(p) => pixel_map(&preds[p]),
            None => HashMap::new(),
        };
        let parts: Vec<_> = part_ious(&pm, &gm, num_classes).into_iter().filter(|t| t.1 > 0).collect();
        if parts.is_empty() {
            continue;
        }
        let correct = parts.iter().filter(|t| t.2.unwrap() > 0.5).count();
        per_gt.push((correct, parts.len()));
    }
    if per_gt.is_empty() {
        return None;
    }
    Some(match mode {
        PcpMode::Global => {
            per_gt.iter().map(|c| c.0).sum::<usize>() as f64 / per_gt.iter().map(|c| c.1).sum::<usize>() as f64
        }
        PcpMode::PerInstanceMean => {
            per_gt.iter().map(|c| c.0 as f64 / c.1 as f64).sum::<f64>() / per_gt.len() as f64
        }
    })
}

pub struct Scene {
    pub num_classes: u16,
    pub preds: Vec<InstanceParsing>,
    pub gts: Vec<InstanceParsing>,
}

pub fn random_instance(rng: &mut impl Rng, num_classes: u16, image: i64) -> InstanceParsing {
    let (w, h) = (rng.gen_range(1..=5usize), rng.gen_range(1..=5usize));
    let labels = (0..w * h)
        .map(|_| {
            if rng.gen_bool(0.05) {
                IGNORE
            } else {
                rng.gen_range(0..num_classes)
            }
        })
        .collect();
    let x1 = rng.gen_range(-2..image) as f64 + rng.gen_range(0.0..1.0);
    let y1 = rng.gen_range(-2..image) as f64 + rng.gen_range(0.0..1.0);
    InstanceParsing {
        labels: LabelGrid::new(w, h, labels).unwrap(),
        score: f64::from(rng.gen_range(1..=10u32)) / 10.0,
        bbox: [x1, y1, x1 + w as f64, y1 + h as f64],
    }
}

pub fn perturbed(rng: &mut impl Rng, gt: &InstanceParsing, num_classes: u16) -> InstanceParsing {
    let mut p = gt.clone();
    for v in &mut p.labels.labels {
        if rng.gen_bool(0.2) {
            *v = rng.gen_range(0..num_classes);
        }
    }
    if rng.gen_bool(0.3) {
        let (dx, dy) = (rng.gen_range(-1..=1) as f64, rng.gen_range(-1..=1) as f64);
        p.bbox = [p.bbox[0] + dx, p.bbox[1] + dy, p.bbox[2] + dx, p.bbox[3] + dy];
    }
    p.score = f64::from(rng.gen_range(1..=10u32)) / 10.0;
    p
}

pub fn random_scene(seed: u64) -> Scene {
    let mut rng = seeded_rng(seed);
    let num_classes = rng.gen_range(2..=5u16);
    let image = rng.gen_range(4..=10i64);
    let gts: Vec<InstanceParsing> = (0..rng.gen_range(0..=5))
        .map(|_| random_instance(&mut rng, num_classes, image))
        .collect();
    let preds = (0..rng.gen_range(0..=5))
        .map(|_| {
            if !gts.is_empty() && rng.gen_bool(0.7) {
                let g = gts.choose(&mut rng).unwrap().clone();
                perturbed(&mut rng, &g, num_classes)
            } else {
                random_instance(&mut rng, num_classes, image)
            }
        })
        .collect();
    Scene { num_classes, preds, gts }
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}


pub fn gps_oracle(pred: &DensePoseInstance, gt: &DensePoseInstance, kappa: f64) -> f64 {
    let mut by_pixel: HashMap<(u32, u32), &DensePosePoint> = HashMap::new();
    for p in &pred.points {
        by_pixel.entry((p.x, p.y)).or_insert(p);
    }
    let total: f64 = gt
        .points
        .iter()
        .map(|g| match by_pixel.get(&(g.x, g.y)) {
            Some(p) if p.part == g.part => {
                let d2 = (p.u - g.u).powi(2) + (p.v - g.v).powi(2);
                (-d2 / (2.0 * kappa * kappa)).exp()
            }
            _ => 0.0,
        })
        .sum();
    total / gt.points.len() as f64
}

pub fn densepose_oracle(preds: &[DensePoseInstance], gts: &[DensePoseInstance], kappa: f64) -> (f64, f64, f64) {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let q: Vec<Vec<f64>> = preds.iter().map(|p| gts.iter().map(|g| gps_oracle(p, g, kappa)).collect()).collect();
    let aps: Vec<f64> = (0..10)
        .map(|i| {
            let t = (50 + 5 * i) as f64 / 100.0;
            let m = match_oracle(&scores, &q, t);
            ap_oracle(&scores, &m.iter().map(Option::is_some).collect::<Vec<_>>(), gts.len())
        })
        .collect();
    (aps.iter().sum::<f64>() / 10.0, aps[0], aps[5])
}

pub fn random_point(rng: &mut impl Rng) -> DensePosePoint {
    DensePosePoint {
        part: rng.gen_range(1..=4),
        u: rng.gen_range(0.0..=1.0),
        v: rng.gen_range(0.0..=1.0),
        x: rng.gen_range(0..6),
        y: rng.gen_range(0..6),
    }
}

pub fn random_dense_scene(seed: u64) -> (Vec<DensePoseInstance>, Vec<DensePoseInstance>) {
    let mut rng = seeded_rng(seed);
    let gts: Vec<DensePoseInstance> = (0..rng.gen_range(0..=5))
        .map(|_| DensePoseInstance {
            score: 1.0,
            bbox: [0.0, 0.0, 6.0, 6.0],
            points: (0..rng.gen_range(1..=6)).map(|_| random_point(&mut rng)).collect(),
        })
        .collect();
    let preds = (0..rng.gen_range(0..=5))
        .map(|_| {
            let score = f64::from(rng.gen_range(1..=10u32)) / 10.0;
            let points = match gts.choose(&mut rng) {
                Some(g) if rng.gen_bool(0.75) => g
                    .points
                    .iter()
                    .filter_map(|p| {
                        if !rng.gen_bool(0.85) {
                            return None;
                        }
                        let mut p = *p;
                        let noise = rng.gen_range(0.0..0.3);
                        p.u = (p.u + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0);
                        p.v = (p.v + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0);
                        if rng.gen_bool(0.1) {
                            p.part = rng.gen_range(1..=4);
                        }
                        Some(p)
                    })
                    .collect(),
                _ => (0..rng.gen_range(0..=6)).map(|_| random_point(&mut rng)).collect(),
            };
            DensePoseInstance {
                score,
                bbox: [0.0, 0.0, 6.0, 6.0],
                points,
            }
        })
        .collect();
    (preds, gts)
}

/// Checks every pred/gt pair for every shape with at most six cells;
/// returns the number of pairs.
pub fn enumerate_small_grid_pairs() -> u64 {
    let mut pred = [0u16; 6];
    let mut gt = [0u16; 6];
    let mut pairs = 0u64;
    for h in 1..=4usize {
        for w in 1..=4usize {
            let n = w * h;
            if n > 6 {
                continue;
            }
            let count = 3u64.pow(n as u32);
            for pc in 0..count {
                ternary(pc, n, &mut pred);
                for gc in 0..count {
                    ternary(gc, n, &mut gt);
                    check_miou_pair(w, h, &pred[..n], &gt[..n]);
                    pairs += 1;
                }
            }
        }
    }
    pairs
}

/// Checks one grid pair per joint (gt, pred) histogram for every shape up
/// to 4x4; returns the number of pairs.
pub fn enumerate_joint_histograms() -> u64 {
    // mIoU depends on a grid pair only through the joint (gt, pred) histogram
    // of its cells, so enumerating every histogram covers every pair of grids
    // of each shape up to a permutation of pixels. Permutation invariance is
    // covered by the pixel-order property test.
    let mut checked = 0u64;
    for h in 1..=4usize {
        for w in 1..=4usize {
            let n = w * h;
            compositions(n, 9, &mut Vec::new(), &mut |counts| {
                let mut pred = Vec::with_capacity(n);
                let mut gt = Vec::with_capacity(n);
                for (cat, &c) in counts.iter().enumerate() {
                    for _ in 0..c {
                        gt.push((cat / 3) as u16);
                        pred.push((cat % 3) as u16);
                    }
                }
                check_miou_pair(w, h, &pred, &gt);
                checked += 1;
            });
        }
    }
    checked
}

/// Largest deviation between the library and the oracles over every parsing
/// metric of one random scene. Infinite when one side errors and the other
/// does not.
pub fn parsing_scene_deviation(seed: u64) -> f64 {
    let s = random_scene(seed);
    let c = usize::from(s.num_classes);
    let mut worst: f64 = 0.0;
    let mut track = |got: f64, want: f64| worst = worst.max((got - want).abs());
    for &t in &ap_vol_thresholds() {
        track(ap_p(&s.preds, &s.gts, c, t).unwrap(), ap_p_oracle(&s.preds, &s.gts, s.num_classes, t));
    }
    let vol_want = (1..=9)
        .map(|i| ap_p_oracle(&s.preds, &s.gts, s.num_classes, i as f64 / 10.0))
        .sum::<f64>()
        / 9.0;
    track(ap_p_vol(&s.preds, &s.gts, c).unwrap(), vol_want);
    for mode in [PcpMode::Global, PcpMode::PerInstanceMean] {
        match (pcp50(&s.preds, &s.gts, c, mode), pcp_oracle(&s.preds, &s.gts, s.num_classes, mode)) {
            (Ok(got), Some(want)) => track(got, want),
            (Err(_), None) => {}
            _ => track(f64::INFINITY, 0.0),
        }
    }
    let q = quality_oracle(&s.preds, &s.gts, s.num_classes);
    for (p, row) in s.preds.iter().zip(&q) {
        for (g, &want) in s.gts.iter().zip(row) {
            track(app_score(p, g, c).unwrap(), want);
        }
    }
    worst
}

/// Largest deviation of AP, AP50 and AP75 from the oracle on one random
/// dense-pose scene.
pub fn densepose_scene_deviation(seed: u64) -> f64 {
    let cfg = GpsConfig::default();
    let (preds, gts) = random_dense_scene(seed);
    let got = densepose_ap(&preds, &gts, &cfg).unwrap();
    let (ap, ap50, ap75) = densepose_oracle(&preds, &gts, cfg.kappa);
    (got.ap - ap).abs().max((got.ap50 - ap50).abs()).max((got.ap75 - ap75).abs())
}
