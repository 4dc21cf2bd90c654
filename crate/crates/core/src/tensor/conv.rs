use super::Tensor;
use crate::error::{check_dim, invalid, Result};
use crate::params::{InitScheme, Parameters};
use rand::Rng;
use rayon::prelude::*;

/// Weights `[c_out, c_in, k_h, k_w]`, bias `[c_out]` and the sampling geometry
/// of a 2-D convolution. Also used for the transposed convolution, with the
/// same weight layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub c_out: usize,
    pub c_in: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients of a convolution's weights and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    /// Zero weights and bias, stride 1, no padding, no dilation.
    pub fn zeros(c_out: usize, c_in: usize, k_h: usize, k_w: usize) -> Self {
        Self {
            c_out,
            c_in,
            k_h,
            k_w,
            stride: 1,
            padding: 0,
            dilation: 1,
            weights: vec![0.0; c_out * c_in * k_h * k_w],
            bias: vec![0.0; c_out],
        }
    }

    pub fn new(
        c_out: usize,
        c_in: usize,
        k_h: usize,
        k_w: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let p = Self {
            weights,
            bias,
            ..Self::zeros(c_out, c_in, k_h, k_w)
        };
        p.validate()?;
        Ok(p)
    }

    pub fn init<R: Rng + ?Sized>(
        c_out: usize,
        c_in: usize,
        k_h: usize,
        k_w: usize,
        scheme: InitScheme,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(c_out, c_in, k_h, k_w);
        let bound = scheme.bound(c_in * k_h * k_w);
        for v in p.weights.iter_mut().chain(p.bias.iter_mut()) {
            *v = rng.gen_range(-bound..bound);
        }
        p
    }

    /// 1×1 convolution mapping channel `i` to channel `i` with weight 1.
    pub fn identity(channels: usize) -> Self {
        let mut p = Self::zeros(channels, channels, 1, 1);
        for i in 0..channels {
            p.weights[i * channels + i] = 1.0;
        }
        p
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_h == 0 || self.k_w == 0 {
            return invalid("conv2d", "kernel dimensions must be at least 1");
        }
        if self.stride == 0 || self.dilation == 0 {
            return invalid("conv2d", "stride and dilation must be positive");
        }
        check_dim(
            "conv2d",
            "weights length",
            self.c_out * self.c_in * self.k_h * self.k_w,
            self.weights.len(),
        )?;
        check_dim("conv2d", "bias length", self.c_out, self.bias.len())
    }

    #[inline]
    fn weight(&self, o: usize, c: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.c_in + c) * self.k_h + ky) * self.k_w + kx]
    }

    /// Output extent along one axis: `(len + 2·pad − dil·(k−1) − 1) / stride + 1`.
    pub fn output_len(&self, len: usize, k: usize, axis: &'static str) -> Result<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span {
            return invalid(
                "conv2d",
                format!("{axis} {len} with padding {} is smaller than the dilated kernel span {span}", self.padding),
            );
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            self.output_len(h, self.k_h, "height")?,
            self.output_len(w, self.k_w, "width")?,
        ))
    }

    /// Wrap gradients in a parameter-shaped container with this layer's geometry.
    pub fn gradient_like(&self, grads: ConvGrads) -> Self {
        Self {
            weights: grads.weights,
            bias: grads.bias,
            ..self.clone()
        }
    }
}

impl Parameters for ConvParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.weights);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.weights);
        f(&mut self.bias);
    }
}

/// Output positions `o` in `[lo, hi)` for which `o·stride + offset − pad`
/// lands inside `[0, len)`.
#[inline]
pub(super) fn valid_range(out_len: usize, stride: usize, offset: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    if len + pad <= offset {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - offset) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Dilated, strided, zero-padded cross-correlation.
///
/// Each output element accumulates its taps in `(c_in, k_y, k_x)` ascending
/// order starting from zero and adds the bias last.
pub fn conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    p.validate()?;
    check_dim("conv2d", "input channels", p.c_in, x.c())?;
    let [n, _, h, w] = x.shape();
    let (oh, ow) = p.output_hw(h, w)?;
    let mut out = Tensor::zeros([n, p.c_out, oh, ow]);
    let plane = oh * ow;
    if out.is_empty() {
        return Ok(out);
    }
    let (s, d, pad) = (p.stride, p.dilation, p.padding);
    out.data_mut().par_chunks_mut(plane).enumerate().for_each(|(idx, acc)| {
        let (b, o) = (idx / p.c_out, idx % p.c_out);
        for c in 0..p.c_in {
            let src = x.plane(b, c);
            for ky in 0..p.k_h {
                let (y0, y1) = valid_range(oh, s, ky * d, pad, h);
                for kx in 0..p.k_w {
                    let wv = p.weight(o, c, ky, kx);
                    let (x0, x1) = valid_range(ow, s, kx * d, pad, w);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy * s + ky * d - pad;
                        let row = &src[iy * w..(iy + 1) * w];
                        let dst = &mut acc[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = x0 + kx * d - pad;
                            let len = x1 - x0;
                            for (a, v) in dst[x0..x1].iter_mut().zip(&row[ix0..ix0 + len]) {
                                *a += wv * v;
                            }
                        } else {
                            for ox in x0..x1 {
                                dst[ox] += wv * row[ox * s + kx * d - pad];
                            }
                        }
                    }
                }
            }
        }
        let bias = p.bias[o];
        for a in acc.iter_mut() {
            *a += bias;
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to its input, weights and bias.
pub fn conv2d_backward(x: &Tensor, p: &ConvParams, dy: &Tensor) -> Result<(Tensor, ConvGrads)> {
    p.validate()?;
    check_dim("conv2d_backward", "input channels", p.c_in, x.c())?;
    let [n, _, h, w] = x.shape();
    let (oh, ow) = p.output_hw(h, w)?;
    for (i, (dim, want)) in [("batch", n), ("channels", p.c_out), ("height", oh), ("width", ow)]
        .into_iter()
        .enumerate()
    {
        check_dim("conv2d_backward", dim, want, dy.shape()[i])?;
    }
    let (s, d, pad) = (p.stride, p.dilation, p.padding);
    let taps = p.k_h * p.k_w;

    let bias: Vec<f64> = (0..p.c_out)
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
            .par_chunks_mut(p.c_in * taps)
            .enumerate()
            .for_each(|(o, dw)| {
                for c in 0..p.c_in {
                    for ky in 0..p.k_h {
                        let (y0, y1) = valid_range(oh, s, ky * d, pad, h);
                        for kx in 0..p.k_w {
                            let (x0, x1) = valid_range(ow, s, kx * d, pad, w);
                            let mut acc = 0.0;
                            for b in 0..n {
                                let src = x.plane(b, c);
                                let g = dy.plane(b, o);
                                for oy in y0..y1 {
                                    let iy = oy * s + ky * d - pad;
                                    for ox in x0..x1 {
                                        acc += g[oy * ow + ox] * src[iy * w + ox * s + kx * d - pad];
                                    }
                                }
                            }
                            dw[(c * p.k_h + ky) * p.k_w + kx] = acc;
                        }
                    }
                }
            });
    }

    let mut dx = Tensor::zeros(x.shape());
    let plane = h * w;
    if !dx.is_empty() {
        dx.data_mut().par_chunks_mut(plane).enumerate().for_each(|(idx, acc)| {
            let (b, c) = (idx / p.c_in, idx % p.c_in);
            for o in 0..p.c_out {
                let g = dy.plane(b, o);
                for ky in 0..p.k_h {
                    let (y0, y1) = valid_range(oh, s, ky * d, pad, h);
                    for kx in 0..p.k_w {
                        let wv = p.weight(o, c, ky, kx);
                        let (x0, x1) = valid_range(ow, s, kx * d, pad, w);
                        for oy in y0..y1 {
                            let iy = oy * s + ky * d - pad;
                            for ox in x0..x1 {
                                acc[iy * w + ox * s + kx * d - pad] += wv * g[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        });
    }
    Ok((dx, ConvGrads { weights, bias }))
}
