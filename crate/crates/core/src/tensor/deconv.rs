use super::{ConvGrads, ConvParams, Tensor};
use crate::error::{check_dim, invalid, Result};
use rayon::prelude::*;

/// Only non-overlapping transposed convolutions are supported: square kernel
/// equal to the stride, no padding, no dilation. The parsing head uses 2×2
/// with stride 2.
fn check_supported(p: &ConvParams) -> Result<()> {
    p.validate()?;
    if p.k_h != p.k_w || p.k_h != p.stride || p.padding != 0 || p.dilation != 1 {
        return invalid(
            "deconv2d",
            format!(
                "unsupported configuration kernel {}x{} stride {} padding {} dilation {}; \
                 kernel must equal stride with no padding or dilation",
                p.k_h, p.k_w, p.stride, p.padding, p.dilation
            ),
        );
    }
    Ok(())
}

/// Transposed convolution, `out[o, s·y+ky, s·x+kx] = b[o] + Σ_c w[o,c,ky,kx]·x[c,y,x]`.
///
/// Weights use the `[c_out, c_in, k, k]` layout of [`ConvParams`].
pub fn deconv2d_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    check_supported(p)?;
    check_dim("deconv2d", "input channels", p.c_in, x.c())?;
    let [n, _, h, w] = x.shape();
    let s = p.stride;
    let (oh, ow) = (h * s, w * s);
    let mut out = Tensor::zeros([n, p.c_out, oh, ow]);
    if out.is_empty() {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, o) = (idx / p.c_out, idx % p.c_out);
            for c in 0..p.c_in {
                let src = x.plane(b, c);
                for ky in 0..s {
                    for kx in 0..s {
                        let wv = p.weights[((o * p.c_in + c) * s + ky) * s + kx];
                        for y in 0..h {
                            let row = &mut dst[(y * s + ky) * ow..];
                            for xx in 0..w {
                                row[xx * s + kx] += wv * src[y * w + xx];
                            }
                        }
                    }
                }
            }
            let bias = p.bias[o];
            for v in dst.iter_mut() {
                *v += bias;
            }
        });
    Ok(out)
}

pub fn deconv2d_backward(x: &Tensor, p: &ConvParams, dy: &Tensor) -> Result<(Tensor, ConvGrads)> {
    check_supported(p)?;
    check_dim("deconv2d_backward", "input channels", p.c_in, x.c())?;
    let [n, _, h, w] = x.shape();
    let s = p.stride;
    let (oh, ow) = (h * s, w * s);
    for (i, (dim, want)) in [("batch", n), ("channels", p.c_out), ("height", oh), ("width", ow)]
        .into_iter()
        .enumerate()
    {
        check_dim("deconv2d_backward", dim, want, dy.shape()[i])?;
    }

    let bias = (0..p.c_out)
        .map(|o| {
            let mut acc = 0.0;
            for b in 0..n {
                acc += dy.plane(b, o).iter().sum::<f64>();
            }
            acc
        })
        .collect();

    let mut weights = vec![0.0; p.weights.len()];
    if !weights.is_empty() {
        weights
            .par_chunks_mut(p.c_in * s * s)
            .enumerate()
            .for_each(|(o, dw)| {
                for c in 0..p.c_in {
                    for ky in 0..s {
                        for kx in 0..s {
                            let mut acc = 0.0;
                            for b in 0..n {
                                let src = x.plane(b, c);
                                let g = dy.plane(b, o);
                                for y in 0..h {
                                    for xx in 0..w {
                                        acc += g[(y * s + ky) * ow + xx * s + kx] * src[y * w + xx];
                                    }
                                }
                            }
                            dw[(c * s + ky) * s + kx] = acc;
                        }
                    }
                }
            });
    }

    let mut dx = Tensor::zeros(x.shape());
    if !dx.is_empty() {
        dx.data_mut()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(idx, acc)| {
                let (b, c) = (idx / p.c_in, idx % p.c_in);
                for o in 0..p.c_out {
                    let g = dy.plane(b, o);
                    for ky in 0..s {
                        for kx in 0..s {
                            let wv = p.weights[((o * p.c_in + c) * s + ky) * s + kx];
                            for y in 0..h {
                                for xx in 0..w {
                                    acc[y * w + xx] += wv * g[(y * s + ky) * ow + xx * s + kx];
                                }
                            }
                        }
                    }
                }
            });
    }
    Ok((dx, ConvGrads { weights, bias }))
}
