//! Geometric and Context Encoding: an ASPP context block followed by an
//! embedded-Gaussian non-local block, all at one channel width (256 in the
//! canonical head).
//!
//! ```text
//! x ─┬─ 1×1 ─────────────── relu ─┐
//!    ├─ 3×3 rate 6 ──────── relu ─┤
//!    ├─ 3×3 rate 12 ─────── relu ─┼─ concat(5C) ─ 1×1 ─ relu ─ a
//!    ├─ 3×3 rate 18 ─────── relu ─┤
//!    └─ GAP ─ 1×1 ─ relu ─ upsample┘
//!
//! a ─┬─ θ, φ, g (1×1) ─ softmax(θᵀφ)·g ─ W_z (1×1) ─ BN ─┐
//!    └─────────────────────────────────────────────────── + ─ y
//! ```

use crate::error::{check_dim, invalid, Result};
use crate::params::{InitScheme, Parameters};
use crate::tensor::{
    batchnorm_inference, batchnorm_inference_backward, bilinear_resize, bilinear_resize_backward,
    conv2d_backward, conv2d_forward, global_avg_pool, global_avg_pool_backward, relu, relu_backward,
    BnParams, ConvParams, Tensor,
};
use rand::Rng;
use rayon::prelude::*;

/// Channel width of every convolution in the canonical module.
pub const GCE_CHANNELS: usize = 256;

/// Dilation rates of the three atrous branches.
pub const ASPP_RATES: [usize; 3] = [6, 12, 18];

#[derive(Clone, Debug, PartialEq)]
pub struct AsppParams {
    pub branch_1x1: ConvParams,
    /// Atrous 3×3 branches at rates 6, 12 and 18.
    pub branch_atrous: [ConvParams; 3],
    pub image_conv: ConvParams,
    pub fuse: ConvParams,
}

impl AsppParams {
    pub fn init<R: Rng + ?Sized>(width: usize, scheme: InitScheme, rng: &mut R) -> Self {
        let atrous = ASPP_RATES.map(|rate| {
            ConvParams::init(width, width, 3, 3, scheme, rng)
                .with_dilation(rate)
                .with_padding(rate)
        });
        Self {
            branch_1x1: ConvParams::init(width, width, 1, 1, scheme, rng),
            branch_atrous: atrous,
            image_conv: ConvParams::init(width, width, 1, 1, scheme, rng),
            fuse: ConvParams::init(width, 5 * width, 1, 1, scheme, rng),
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            branch_1x1: ConvParams::zeros(width, width, 1, 1),
            branch_atrous: ASPP_RATES.map(|rate| {
                ConvParams::zeros(width, width, 3, 3)
                    .with_dilation(rate)
                    .with_padding(rate)
            }),
            image_conv: ConvParams::zeros(width, width, 1, 1),
            fuse: ConvParams::zeros(width, 5 * width, 1, 1),
        }
    }

    pub fn width(&self) -> usize {
        self.branch_1x1.c_out
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.width();
        let square = |p: &ConvParams, k: usize, c_in: usize| -> Result<()> {
            p.validate()?;
            check_dim("aspp", "branch output channels", w, p.c_out)?;
            check_dim("aspp", "branch input channels", c_in, p.c_in)?;
            check_dim("aspp", "branch kernel", k, p.k_h)?;
            check_dim("aspp", "branch kernel", k, p.k_w)
        };
        square(&self.branch_1x1, 1, w)?;
        square(&self.image_conv, 1, w)?;
        square(&self.fuse, 1, 5 * w)?;
        for (p, rate) in self.branch_atrous.iter().zip(ASPP_RATES) {
            square(p, 3, w)?;
            if p.dilation != rate || p.padding != rate || p.stride != 1 {
                return invalid("aspp", format!("atrous branch must use rate {rate} with matching padding"));
            }
        }
        Ok(())
    }

    fn convs(&self) -> [&ConvParams; 6] {
        let [a, b, c] = &self.branch_atrous;
        [&self.branch_1x1, a, b, c, &self.image_conv, &self.fuse]
    }

    fn convs_mut(&mut self) -> [&mut ConvParams; 6] {
        let [a, b, c] = &mut self.branch_atrous;
        [&mut self.branch_1x1, a, b, c, &mut self.image_conv, &mut self.fuse]
    }
}

impl Parameters for AsppParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for p in self.convs() {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for p in self.convs_mut() {
            p.visit_mut(f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NonLocalParams {
    pub theta: ConvParams,
    pub phi: ConvParams,
    pub g: ConvParams,
    pub w_z: ConvParams,
    pub bn: BnParams,
}

impl NonLocalParams {
    /// Fresh block: the output batch norm has zero gamma, so the block is an
    /// exact identity until trained.
    pub fn init<R: Rng + ?Sized>(width: usize, scheme: InitScheme, rng: &mut R) -> Self {
        let mut bn = BnParams::identity(width);
        bn.gamma.fill(0.0);
        Self {
            theta: ConvParams::init(width, width, 1, 1, scheme, rng),
            phi: ConvParams::init(width, width, 1, 1, scheme, rng),
            g: ConvParams::init(width, width, 1, 1, scheme, rng),
            w_z: ConvParams::init(width, width, 1, 1, scheme, rng),
            bn,
        }
    }

    /// Draws gamma, beta and running statistics so the residual branch is live.
    pub fn randomize_bn<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for v in &mut self.bn.gamma {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in self.bn.beta.iter_mut().chain(self.bn.running_mean.iter_mut()) {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in &mut self.bn.running_var {
            *v = rng.gen_range(0.5..2.0);
        }
    }

    pub fn width(&self) -> usize {
        self.theta.c_out
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.width();
        for p in [&self.theta, &self.phi, &self.g, &self.w_z] {
            p.validate()?;
            check_dim("nonlocal", "embedding output channels", w, p.c_out)?;
            check_dim("nonlocal", "embedding input channels", w, p.c_in)?;
            if p.k_h != 1 || p.k_w != 1 || p.stride != 1 || p.padding != 0 {
                return invalid("nonlocal", "embeddings must be plain 1x1 convolutions");
            }
        }
        self.bn.validate()?;
        check_dim("nonlocal", "batch-norm channels", w, self.bn.channels())
    }
}

impl Parameters for NonLocalParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for p in [&self.theta, &self.phi, &self.g, &self.w_z] {
            p.visit(f);
        }
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for p in [&mut self.theta, &mut self.phi, &mut self.g, &mut self.w_z] {
            p.visit_mut(f);
        }
        self.bn.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GceParams {
    pub aspp: AsppParams,
    pub nonlocal: NonLocalParams,
}

impl GceParams {
    pub fn init<R: Rng + ?Sized>(width: usize, scheme: InitScheme, rng: &mut R) -> Self {
        Self {
            aspp: AsppParams::init(width, scheme, rng),
            nonlocal: NonLocalParams::init(width, scheme, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.aspp.width()
    }

    pub fn validate(&self) -> Result<()> {
        self.aspp.validate()?;
        self.nonlocal.validate()?;
        check_dim("gce", "non-local width", self.aspp.width(), self.nonlocal.width())
    }
}

impl Parameters for GceParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.aspp.visit(f);
        self.nonlocal.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.aspp.visit_mut(f);
        self.nonlocal.visit_mut(f);
    }
}

struct AsppTrace {
    pre: Vec<Tensor>,
    pooled: Tensor,
    image_pre: Tensor,
    cat: Tensor,
    fused_pre: Tensor,
}

fn aspp_trace(x: &Tensor, p: &AsppParams) -> Result<(Tensor, AsppTrace)> {
    p.validate()?;
    check_dim("aspp", "input channels", p.width(), x.c())?;
    let [_, _, h, w] = x.shape();
    let mut pre = vec![conv2d_forward(x, &p.branch_1x1)?];
    for branch in &p.branch_atrous {
        pre.push(conv2d_forward(x, branch)?);
    }
    let pooled = global_avg_pool(x)?;
    let image_pre = conv2d_forward(&pooled, &p.image_conv)?;
    let image = bilinear_resize(&relu(&image_pre), h, w)?;
    let acts: Vec<Tensor> = pre.iter().map(relu).collect();
    let mut parts: Vec<&Tensor> = acts.iter().collect();
    parts.push(&image);
    let cat = Tensor::concat_channels(&parts)?;
    let fused_pre = conv2d_forward(&cat, &p.fuse)?;
    let y = relu(&fused_pre);
    Ok((
        y,
        AsppTrace {
            pre,
            pooled,
            image_pre,
            cat,
            fused_pre,
        },
    ))
}

/// Five parallel branches, each followed by relu, concatenated and fused by a
/// 1×1 convolution plus relu. The image-level branch pools, convolves,
/// applies relu and then upsamples back to the input size.
pub fn aspp_forward(x: &Tensor, p: &AsppParams) -> Result<Tensor> {
    Ok(aspp_trace(x, p)?.0)
}

fn min_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// Smallest |pre-activation| over every relu in the block, i.e. how far `x`
/// is from a point where the block is not differentiable.
pub fn aspp_relu_margin(x: &Tensor, p: &AsppParams) -> Result<f64> {
    let (_, t) = aspp_trace(x, p)?;
    Ok(t.pre
        .iter()
        .chain([&t.image_pre, &t.fused_pre])
        .map(min_abs)
        .fold(f64::INFINITY, f64::min))
}

pub fn aspp_backward(x: &Tensor, p: &AsppParams, dy: &Tensor) -> Result<(Tensor, AsppParams)> {
    let (y, t) = aspp_trace(x, p)?;
    if dy.shape() != y.shape() {
        return invalid("aspp_backward", "upstream gradient shape differs from output");
    }
    let width = p.width();
    let mut grads = p.clone();

    let dfused = relu_backward(&t.fused_pre, dy)?;
    let (dcat, gfuse) = conv2d_backward(&t.cat, &p.fuse, &dfused)?;
    grads.fuse = p.fuse.gradient_like(gfuse);
    let dparts = dcat.split_channels(&[width; 5])?;

    let mut dx = Tensor::zeros(x.shape());
    let branches: Vec<(&ConvParams, &mut ConvParams)> = {
        let [ga, gb, gc] = &mut grads.branch_atrous;
        let [a, b, c] = &p.branch_atrous;
        vec![(&p.branch_1x1, &mut grads.branch_1x1), (a, ga), (b, gb), (c, gc)]
    };
    for (((params, slot), pre), dpart) in branches.into_iter().zip(&t.pre).zip(&dparts) {
        let dpre = relu_backward(pre, dpart)?;
        let (dxi, g) = conv2d_backward(x, params, &dpre)?;
        dx.add_assign(&dxi);
        *slot = params.gradient_like(g);
    }

    let dimage = bilinear_resize_backward(t.image_pre.shape(), &dparts[4])?;
    let dimage_pre = relu_backward(&t.image_pre, &dimage)?;
    let (dpooled, gimage) = conv2d_backward(&t.pooled, &p.image_conv, &dimage_pre)?;
    grads.image_conv = p.image_conv.gradient_like(gimage);
    dx.add_assign(&global_avg_pool_backward(x.shape(), &dpooled)?);
    Ok((dx, grads))
}

struct NonLocalTrace {
    theta: Tensor,
    phi: Tensor,
    g: Tensor,
    /// Row-stochastic `[m × m]` attention per batch element.
    attention: Vec<Vec<f64>>,
    context: Tensor,
    z: Tensor,
}

/// Row-softmax of `θᵀφ` for one batch element; `theta` and `phi` are `[c, m]`.
fn attention_rows(theta: &[f64], phi: &[f64], c: usize, m: usize) -> Vec<f64> {
    let mut a = vec![0.0; m * m];
    a.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        for ch in 0..c {
            let t = theta[ch * m + i];
            for (r, p) in row.iter_mut().zip(&phi[ch * m..(ch + 1) * m]) {
                *r += t * p;
            }
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            sum += *r;
        }
        for r in row.iter_mut() {
            *r /= sum;
        }
    });
    a
}

fn nonlocal_trace(x: &Tensor, p: &NonLocalParams) -> Result<(Tensor, NonLocalTrace)> {
    p.validate()?;
    check_dim("nonlocal", "input channels", p.width(), x.c())?;
    let [n, c, h, w] = x.shape();
    let m = h * w;
    if m == 0 {
        return invalid("nonlocal", "input has zero spatial size");
    }
    let theta = conv2d_forward(x, &p.theta)?;
    let phi = conv2d_forward(x, &p.phi)?;
    let g = conv2d_forward(x, &p.g)?;
    let item = c * m;
    let mut attention = Vec::with_capacity(n);
    let mut context = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        let range = b * item..(b + 1) * item;
        let a = attention_rows(&theta.data()[range.clone()], &phi.data()[range.clone()], c, m);
        let gb = &g.data()[range.clone()];
        // context[ch, i] = Σ_j A[i, j] · g[ch, j]
        context.data_mut()[range].par_chunks_mut(m).enumerate().for_each(|(ch, dst)| {
            let grow = &gb[ch * m..(ch + 1) * m];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = a[i * m..(i + 1) * m].iter().zip(grow).map(|(x, y)| x * y).sum();
            }
        });
        attention.push(a);
    }
    let z = conv2d_forward(&context, &p.w_z)?;
    let y = x.add(&batchnorm_inference(&z, &p.bn)?)?;
    Ok((
        y,
        NonLocalTrace {
            theta,
            phi,
            g,
            attention,
            context,
            z,
        },
    ))
}

/// Embedded-Gaussian non-local block with a batch-normalized residual,
/// `y = x + BN(W_z · (softmax(θ(x)ᵀ φ(x)) · g(x)))` over the `h·w` positions.
pub fn nonlocal_forward(x: &Tensor, p: &NonLocalParams) -> Result<Tensor> {
    Ok(nonlocal_trace(x, p)?.0)
}

/// The `[m × m]` attention matrix (row-major) of each batch element.
pub fn nonlocal_attention(x: &Tensor, p: &NonLocalParams) -> Result<Vec<Vec<f64>>> {
    Ok(nonlocal_trace(x, p)?.1.attention)
}

pub fn nonlocal_backward(x: &Tensor, p: &NonLocalParams, dy: &Tensor) -> Result<(Tensor, NonLocalParams)> {
    let (y, t) = nonlocal_trace(x, p)?;
    if dy.shape() != y.shape() {
        return invalid("nonlocal_backward", "upstream gradient shape differs from output");
    }
    let [n, c, h, w] = x.shape();
    let m = h * w;
    let item = c * m;
    let mut grads = p.clone();

    let (dz, gbn) = batchnorm_inference_backward(&t.z, &p.bn, dy)?;
    grads.bn = p.bn.gradient_like(gbn);
    let (dcontext, gwz) = conv2d_backward(&t.context, &p.w_z, &dz)?;
    grads.w_z = p.w_z.gradient_like(gwz);

    let mut dtheta = Tensor::zeros(t.theta.shape());
    let mut dphi = Tensor::zeros(t.phi.shape());
    let mut dg = Tensor::zeros(t.g.shape());
    for b in 0..n {
        let range = b * item..(b + 1) * item;
        let a = &t.attention[b];
        let dctx = &dcontext.data()[range.clone()];
        let gb = &t.g.data()[range.clone()];
        let th = &t.theta.data()[range.clone()];
        let ph = &t.phi.data()[range.clone()];

        // dA[i, j] = Σ_ch dctx[ch, i] · g[ch, j], then through the row softmax.
        let mut dlogits = vec![0.0; m * m];
        dlogits.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            for ch in 0..c {
                let d = dctx[ch * m + i];
                for (r, gv) in row.iter_mut().zip(&gb[ch * m..(ch + 1) * m]) {
                    *r += d * gv;
                }
            }
            let arow = &a[i * m..(i + 1) * m];
            let dot: f64 = arow.iter().zip(row.iter()).map(|(p, d)| p * d).sum();
            for (r, p) in row.iter_mut().zip(arow) {
                *r = p * (*r - dot);
            }
        });

        // dg[ch, j] = Σ_i dctx[ch, i] · A[i, j]
        dg.data_mut()[range.clone()].par_chunks_mut(m).enumerate().for_each(|(ch, dst)| {
            for i in 0..m {
                let d = dctx[ch * m + i];
                for (o, av) in dst.iter_mut().zip(&a[i * m..(i + 1) * m]) {
                    *o += d * av;
                }
            }
        });
        // dθ[ch, i] = Σ_j dL[i, j] · φ[ch, j]
        dtheta.data_mut()[range.clone()].par_chunks_mut(m).enumerate().for_each(|(ch, dst)| {
            let prow = &ph[ch * m..(ch + 1) * m];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = dlogits[i * m..(i + 1) * m].iter().zip(prow).map(|(x, y)| x * y).sum();
            }
        });
        // dφ[ch, j] = Σ_i dL[i, j] · θ[ch, i]
        dphi.data_mut()[range].par_chunks_mut(m).enumerate().for_each(|(ch, dst)| {
            for i in 0..m {
                let tv = th[ch * m + i];
                for (o, dl) in dst.iter_mut().zip(&dlogits[i * m..(i + 1) * m]) {
                    *o += tv * dl;
                }
            }
        });
    }

    let mut dx = dy.clone();
    for (params, slot, dout) in [
        (&p.theta, &mut grads.theta, &dtheta),
        (&p.phi, &mut grads.phi, &dphi),
        (&p.g, &mut grads.g, &dg),
    ] {
        let (dxi, gconv) = conv2d_backward(x, params, dout)?;
        dx.add_assign(&dxi);
        *slot = params.gradient_like(gconv);
    }
    Ok((dx, grads))
}

/// `nonlocal(aspp(x))`.
pub fn gce_forward(x: &Tensor, p: &GceParams) -> Result<Tensor> {
    p.validate()?;
    nonlocal_forward(&aspp_forward(x, &p.aspp)?, &p.nonlocal)
}

/// The non-local part is smooth, so only ASPP contributes kinks.
pub fn gce_relu_margin(x: &Tensor, p: &GceParams) -> Result<f64> {
    aspp_relu_margin(x, &p.aspp)
}

pub fn gce_backward(x: &Tensor, p: &GceParams, dy: &Tensor) -> Result<(Tensor, GceParams)> {
    p.validate()?;
    let a = aspp_forward(x, &p.aspp)?;
    let (da, gnl) = nonlocal_backward(&a, &p.nonlocal, dy)?;
    let (dx, gaspp) = aspp_backward(x, &p.aspp, &da)?;
    Ok((
        dx,
        GceParams {
            aspp: gaspp,
            nonlocal: gnl,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;

    #[test]
    fn canonical_aspp_parameter_total() {
        let p = AsppParams::zeros(GCE_CHANNELS);
        assert_eq!(p.branch_1x1.param_count(), 65_792);
        assert_eq!(p.branch_atrous[0].param_count(), 590_080);
        assert_eq!(p.fuse.param_count(), 327_936);
        assert_eq!(p.param_count(), 65_792 + 3 * 590_080 + 65_792 + 327_936);
    }

    #[test]
    fn zero_aspp_outputs_zero() {
        let x = Tensor::uniform([1, 4, 6, 6], 1.0, &mut seeded_rng(1));
        let y = aspp_forward(&x, &AsppParams::zeros(4)).unwrap();
        assert_eq!(y.shape(), [1, 4, 6, 6]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_input_propagates_through_identity_branches() {
        // Constant input c ≥ 0: the 1×1 and image branches are identities, the
        // atrous branches are zero, and the fuse sums the 1×1 and image slices,
        // so every output equals 2c.
        let width = 3;
        let c = 0.75;
        let mut p = AsppParams::zeros(width);
        p.branch_1x1 = ConvParams::identity(width);
        p.image_conv = ConvParams::identity(width);
        for o in 0..width {
            p.fuse.weights[o * 5 * width + o] = 1.0;
            p.fuse.weights[o * 5 * width + 4 * width + o] = 1.0;
        }
        let x = Tensor::full([2, width, 5, 7], c);
        let y = aspp_forward(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0 * c));
    }

    #[test]
    fn aspp_rejects_wrong_channels_and_rates() {
        let p = AsppParams::zeros(4);
        assert!(aspp_forward(&Tensor::zeros([1, 3, 4, 4]), &p).is_err());
        let mut bad = p.clone();
        bad.branch_atrous[1] = bad.branch_atrous[1].clone().with_dilation(11).with_padding(11);
        assert!(aspp_forward(&Tensor::zeros([1, 4, 4, 4]), &bad).is_err());
    }

    #[test]
    fn fresh_nonlocal_is_identity() {
        let mut rng = seeded_rng(5);
        let p = NonLocalParams::init(4, InitScheme::FanIn, &mut rng);
        let x = Tensor::uniform([2, 4, 5, 3], 3.0, &mut rng);
        assert_eq!(nonlocal_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = seeded_rng(6);
        let mut p = NonLocalParams::init(3, InitScheme::FanIn, &mut rng);
        p.randomize_bn(&mut rng);
        let x = Tensor::uniform([2, 3, 4, 5], 2.0, &mut rng);
        for a in nonlocal_attention(&x, &p).unwrap() {
            assert_eq!(a.len(), 400);
            for row in a.chunks(20) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatially_constant_input_attends_uniformly() {
        let mut rng = seeded_rng(7);
        let p = NonLocalParams::init(3, InitScheme::FanIn, &mut rng);
        let mut data = Vec::new();
        for ch in 0..3 {
            data.extend(std::iter::repeat_n(ch as f64 - 0.7, 12));
        }
        let x = Tensor::from_vec([1, 3, 3, 4], data).unwrap();
        let a = &nonlocal_attention(&x, &p).unwrap()[0];
        assert!(a.iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn fresh_gce_reduces_to_aspp() {
        let mut rng = seeded_rng(8);
        let p = GceParams::init(4, InitScheme::FanIn, &mut rng);
        let x = Tensor::uniform([1, 4, 6, 6], 1.0, &mut rng);
        assert_eq!(gce_forward(&x, &p).unwrap(), aspp_forward(&x, &p.aspp).unwrap());
    }
}
