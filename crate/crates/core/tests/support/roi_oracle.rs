//! RoIAlign reference written as an explicit sum of tent kernels.

#![allow(dead_code)]

use prcnn_core::roi::RoiBox;
use prcnn_core::Tensor;
use rand::Rng;

/// Bilinear sample written as a sum of tent kernels over every pixel, with
/// the coordinate clamped into `[0, len - 1]`.
pub fn tent_sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let mut v = 0.0;
    for i in 0..h {
        let ky = (1.0 - (y - i as f64).abs()).max(0.0);
        if ky == 0.0 {
            continue;
        }
        for j in 0..w {
            let kx = (1.0 - (x - j as f64).abs()).max(0.0);
            v += ky * kx * plane[i * w + j];
        }
    }
    v
}

pub fn roi_align_oracle(f: &Tensor, b: &RoiBox, stride: usize, out: usize, sr: usize) -> Vec<f64> {
    let [_, c, h, w] = f.shape();
    let s = stride as f64;
    let x1 = (b.x1 / s).clamp(0.0, w as f64);
    let x2 = (b.x2 / s).clamp(0.0, w as f64);
    let y1 = (b.y1 / s).clamp(0.0, h as f64);
    let y2 = (b.y2 / s).clamp(0.0, h as f64);
    let (bw, bh) = ((x2 - x1) / out as f64, (y2 - y1) / out as f64);
    let mut res = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let plane = f.plane(0, ch);
        for by in 0..out {
            for bx in 0..out {
                let mut acc = 0.0;
                for iy in 0..sr {
                    for ix in 0..sr {
                        let y = y1 + bh * (by as f64 + (iy as f64 + 0.5) / sr as f64) - 0.5;
                        let x = x1 + bw * (bx as f64 + (ix as f64 + 0.5) / sr as f64) - 0.5;
                        acc += tent_sample(plane, h, w, y, x);
                    }
                }
                res.push(acc / (sr * sr) as f64);
            }
        }
    }
    res
}

pub fn random_box(rng: &mut impl Rng, extent_x: f64, extent_y: f64) -> RoiBox {
    let mut xs = [rng.gen_range(-0.25..1.25) * extent_x, rng.gen_range(-0.25..1.25) * extent_x];
    let mut ys = [rng.gen_range(-0.25..1.25) * extent_y, rng.gen_range(-0.25..1.25) * extent_y];
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    RoiBox::new(xs[0], ys[0], xs[1], ys[1], rng.gen_range(0.0..1.0)).unwrap()
}
