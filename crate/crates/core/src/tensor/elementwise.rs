use super::Tensor;
use crate::error::{invalid, Result};
use rayon::prelude::*;

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = v.max(0.0);
    }
    y
}

/// Passes `dy` where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return invalid("relu_backward", "upstream gradient shape differs from input");
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Spatial mean per channel, `[n, c, h, w] → [n, c, 1, 1]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if h * w == 0 {
        return invalid("global_avg_pool", "input has zero spatial size");
    }
    let area = (h * w) as f64;
    let data = (0..n * c)
        .map(|i| x.plane(i / c, i % c).iter().sum::<f64>() / area)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward(x_shape: [usize; 4], dy: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x_shape;
    if h * w == 0 {
        return invalid("global_avg_pool_backward", "input has zero spatial size");
    }
    if dy.shape() != [n, c, 1, 1] {
        return invalid("global_avg_pool_backward", "upstream gradient must be [n, c, 1, 1]");
    }
    let area = (h * w) as f64;
    let mut dx = Tensor::zeros(x_shape);
    for (plane, &g) in dx.data_mut().chunks_mut(h * w).zip(dy.data()) {
        plane.fill(g / area);
    }
    Ok(dx)
}

/// One axis of half-pixel (align-corners false) sampling: destination index
/// `dst` of `out_len` maps to source coordinate `(dst + 0.5)·in/out − 0.5`,
/// clamped at the border. Returns `(i0, i1, λ)` with the sample
/// `v[i0] + λ·(v[i1] − v[i0])`.
#[inline]
pub(crate) fn half_pixel_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    if i0 + 1 >= in_len {
        (i0, i0, 0.0)
    } else {
        (i0, i0 + 1, src - i0 as f64)
    }
}

fn check_resize(op: &'static str, h: usize, w: usize, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return invalid(op, format!("output size must be at least 1x1, got {out_h}x{out_w}"));
    }
    if h == 0 || w == 0 {
        return invalid(op, "input has zero spatial size");
    }
    Ok(())
}

/// Bilinear resize with half-pixel centers.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    check_resize("bilinear_resize", h, w, out_h, out_w)?;
    let ys: Vec<_> = (0..out_h).map(|i| half_pixel_taps(i, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|i| half_pixel_taps(i, w, out_w)).collect();
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    if out.is_empty() {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(idx, dst)| {
            let src = x.plane(idx / c, idx % c);
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] + lx * (src[y0 * w + x1] - src[y0 * w + x0]);
                    let bot = src[y1 * w + x0] + lx * (src[y1 * w + x1] - src[y1 * w + x0]);
                    dst[oy * out_w + ox] = top + ly * (bot - top);
                }
            }
        });
    Ok(out)
}

pub fn bilinear_resize_backward(x_shape: [usize; 4], dy: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x_shape;
    let [dn, dc, out_h, out_w] = dy.shape();
    check_resize("bilinear_resize_backward", h, w, out_h, out_w)?;
    if (dn, dc) != (n, c) {
        return invalid("bilinear_resize_backward", "upstream gradient batch/channels differ from input");
    }
    let ys: Vec<_> = (0..out_h).map(|i| half_pixel_taps(i, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|i| half_pixel_taps(i, w, out_w)).collect();
    let mut dx = Tensor::zeros(x_shape);
    if dx.is_empty() {
        return Ok(dx);
    }
    dx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(idx, acc)| {
            let g = dy.plane(idx / c, idx % c);
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let gv = g[oy * out_w + ox];
                    let top = gv * (1.0 - ly);
                    let bot = gv * ly;
                    acc[y0 * w + x0] += top * (1.0 - lx);
                    acc[y0 * w + x1] += top * lx;
                    acc[y1 * w + x0] += bot * (1.0 - lx);
                    acc[y1 * w + x1] += bot * lx;
                }
            }
        });
    Ok(dx)
}
