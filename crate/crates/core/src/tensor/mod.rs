//! Dense NCHW tensors of `f64` and the forward/backward kernels the parsing
//! branch is assembled from.
//!
//! Every kernel is a pure function. Parallel kernels split work over
//! independent output planes and keep a fixed reduction order inside each
//! plane, so results do not depend on the number of worker threads.

mod conv;
mod deconv;
mod elementwise;
mod loss;
mod norm;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams};
pub use deconv::{deconv2d_backward, deconv2d_forward};
pub use elementwise::{
    bilinear_resize, bilinear_resize_backward, global_avg_pool, global_avg_pool_backward, relu,
    relu_backward,
};
pub use loss::{softmax_cross_entropy, IGNORE_LABEL};
pub use norm::{batchnorm_inference, batchnorm_inference_backward, BnGrads, BnParams};

use crate::error::{check_dim, invalid, Error, Result};

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        self.carry += if self.sum.abs() >= v.abs() {
            (self.sum - t) + v
        } else {
            (v - t) + self.sum
        };
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.carry
    }
}

impl std::iter::FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::default();
        for v in iter {
            s.add(v);
        }
        s
    }
}
use rand::Rng;

/// A dense `[batch, channels, height, width]` array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        check_dim("tensor", "data length", shape.iter().product(), data.len())?;
        Ok(Self { shape, data })
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: [usize; 4], bound: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    /// The `(n, c)` spatial plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// Batch element `index` as a `[1, c, h, w]` tensor.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        if index >= self.n() {
            return invalid("batch_item", format!("index {index} out of range for batch {}", self.n()));
        }
        let item = self.c() * self.plane_len();
        let data = self.data[index * item..(index + 1) * item].to_vec();
        Ok(Self {
            shape: [1, self.c(), self.h(), self.w()],
            data,
        })
    }

    /// Stack tensors along the batch axis.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return invalid("concat_batch", "no tensors to concatenate");
        };
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            check_dim("concat_batch", "channels", c, p.c())?;
            check_dim("concat_batch", "height", h, p.h())?;
            check_dim("concat_batch", "width", w, p.w())?;
            n += p.n();
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Stack tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return invalid("concat_channels", "no tensors to concatenate");
        };
        let [n, _, h, w] = first.shape;
        for p in parts {
            check_dim("concat_channels", "batch", n, p.n())?;
            check_dim("concat_channels", "height", h, p.h())?;
            check_dim("concat_channels", "width", w, p.w())?;
        }
        let c: usize = parts.iter().map(|p| p.c()).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for p in parts {
                let item = p.c() * h * w;
                data.extend_from_slice(&p.data[b * item..(b + 1) * item]);
            }
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        check_dim("split_channels", "channels", self.c(), sizes.iter().sum())?;
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let mut out: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(n * s * hw)).collect();
        for b in 0..n {
            let mut start = b * c * hw;
            for (dst, &s) in out.iter_mut().zip(sizes) {
                dst.extend_from_slice(&self.data[start..start + s * hw]);
                start += s * hw;
            }
        }
        Ok(out
            .into_iter()
            .zip(sizes)
            .map(|(data, &s)| Self {
                shape: [n, s, h, w],
                data,
            })
            .collect())
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        for (i, dim) in ["batch", "channels", "height", "width"].into_iter().enumerate() {
            check_dim("add", dim, self.shape[i], other.shape[i])?;
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self {
            shape: self.shape,
            data,
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
