//! Named, seeded gradient-check problems covering every differentiable op,
//! the GCE parts and every branch variant.
//!
//! Ops whose output is a tensor are reduced to a scalar with a fixed random
//! projection `L = Σ r ⊙ y`, so every output entry contributes.

use super::{numeric_gradcheck, FnPair, GradcheckReport, DEFAULT_EPS};
use crate::branch::{build_branch_with, Branch, BranchConfig, Stage, Variant};
use crate::error::{invalid, Result};
use crate::gce::{
    aspp_backward, aspp_forward, aspp_relu_margin, gce_backward, gce_forward, gce_relu_margin, nonlocal_backward, nonlocal_forward, AsppParams,
    GceParams, NonLocalParams,
};
use crate::params::{seeded_rng, InitScheme, Parameters};
use crate::roi::{roi_align, roi_align_backward, RoiBox};
use crate::tensor::*;
use rand::Rng;
use serde::Serialize;

/// Elementwise and single-layer kernels.
pub const ELEMENTARY_TOLERANCE: f64 = 1e-6;
/// Multi-layer composites.
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Elementary,
    Composite,
}

impl Tier {
    pub fn tolerance(self) -> f64 {
        match self {
            Tier::Elementary => ELEMENTARY_TOLERANCE,
            Tier::Composite => COMPOSITE_TOLERANCE,
        }
    }

    /// Probe step. Elementary targets are linear or smooth along every probe
    /// direction, so a wide step keeps rounding noise low. Composites contain
    /// relu kinks and use a narrower step that stays well inside
    /// [`KINK_MARGIN`].
    pub fn eps(self) -> f64 {
        match self {
            Tier::Elementary => ELEMENTARY_EPS,
            Tier::Composite => COMPOSITE_EPS,
        }
    }
}

pub const ELEMENTARY_EPS: f64 = 1e-4;
pub const COMPOSITE_EPS: f64 = 1e-5;

/// Composite inputs are redrawn until every relu pre-activation is at least
/// this far from zero, so no probe of size [`COMPOSITE_EPS`] crosses a kink.
pub const KINK_MARGIN: f64 = 1e-4;
const MAX_DRAWS: usize = 1000;

/// Draws inputs until `margin(x) >= KINK_MARGIN`.
fn draw_clear_of_kinks(
    shape: [usize; 4],
    rng: &mut impl Rng,
    margin: impl Fn(&Tensor) -> Result<f64>,
) -> Result<Tensor> {
    for _ in 0..MAX_DRAWS {
        let x = Tensor::uniform(shape, 1.0, rng);
        if margin(&x)? >= KINK_MARGIN {
            return Ok(x);
        }
    }
    invalid("gradcheck", format!("no input within {MAX_DRAWS} draws keeps relu inputs {KINK_MARGIN} from zero"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetOutcome {
    pub target: String,
    pub tier: Tier,
    pub report: GradcheckReport,
}

const ELEMENTARY: [&str; 9] = [
    "conv2d",
    "deconv2d",
    "batchnorm",
    "relu",
    "global_avg_pool",
    "bilinear_resize",
    "softmax_cross_entropy",
    "roi_align",
    "linear_1x1",
];

const COMPOSITE: [&str; 3] = ["nonlocal", "aspp", "gce"];

/// Every target name, in a stable order.
pub fn names() -> Vec<String> {
    ELEMENTARY
        .iter()
        .chain(&COMPOSITE)
        .map(|s| s.to_string())
        .chain(Variant::ALL.iter().map(|v| format!("branch_{}", v.name())))
        .collect()
}

pub fn tier_of(name: &str) -> Option<Tier> {
    if ELEMENTARY.contains(&name) {
        Some(Tier::Elementary)
    } else if COMPOSITE.contains(&name) || branch_variant(name).is_some() {
        Some(Tier::Composite)
    } else {
        None
    }
}

fn branch_variant(name: &str) -> Option<Variant> {
    name.strip_prefix("branch_").and_then(|v| v.parse().ok())
}

/// Runs the named target at the given seed with its tier's probe step.
pub fn run(name: &str, seed: u64) -> Result<TargetOutcome> {
    let eps = tier_of(name).map_or(DEFAULT_EPS, Tier::eps);
    run_with_eps(name, seed, eps)
}

pub fn run_with_eps(name: &str, seed: u64, eps: f64) -> Result<TargetOutcome> {
    let Some(tier) = tier_of(name) else {
        return invalid("gradcheck", format!("unknown target '{name}'"));
    };
    let report = match name {
        "conv2d" => check_conv(seed, eps)?,
        "linear_1x1" => check_linear(seed, eps)?,
        "deconv2d" => check_deconv(seed, eps)?,
        "batchnorm" => check_batchnorm(seed, eps)?,
        "relu" => check_relu(seed, eps)?,
        "global_avg_pool" => check_gap(seed, eps)?,
        "bilinear_resize" => check_bilinear(seed, eps)?,
        "softmax_cross_entropy" => check_softmax_ce(seed, eps)?,
        "roi_align" => check_roi_align(seed, eps)?,
        "nonlocal" => check_nonlocal(seed, eps)?,
        "aspp" => check_aspp(seed, eps)?,
        "gce" => check_gce(seed, eps)?,
        other => check_branch(branch_variant(other).expect("validated above"), seed, eps)?,
    };
    Ok(TargetOutcome {
        target: name.to_string(),
        tier,
        report,
    })
}

fn projection(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).collect::<CompensatedSum>().total()
}

fn tensor_like(shape: [usize; 4], data: &[f64]) -> Result<Tensor> {
    Tensor::from_vec(shape, data.to_vec())
}

fn with_flat<P: Parameters + Clone>(p: &P, flat: &[f64]) -> Result<P> {
    let mut q = p.clone();
    q.load_flat(flat)?;
    Ok(q)
}

/// Gradient check of `x, params ↦ r · forward(x, params)` where `backward`
/// returns `(dx, parameter-shaped grads)`.
fn check_layer<P, F, B>(x: &Tensor, params: &P, forward: F, backward: B, seed: u64, eps: f64) -> Result<GradcheckReport>
where
    P: Parameters + Clone + Sync,
    F: Fn(&Tensor, &P) -> Result<Tensor> + Sync,
    B: Fn(&Tensor, &P, &Tensor) -> Result<(Tensor, P)> + Sync,
{
    let shape = x.shape();
    let y = forward(x, params)?;
    let r = projection(y.len(), &mut seeded_rng(seed ^ 0xabcd));
    let out_shape = y.shape();
    let f = FnPair {
        value: |v: &[Vec<f64>]| {
            let y = forward(&tensor_like(shape, &v[0])?, &with_flat(params, &v[1])?)?;
            Ok(dot(&r, y.data()))
        },
        gradient: |v: &[Vec<f64>]| {
            let dy = Tensor::from_vec(out_shape, r.clone())?;
            let (dx, g) = backward(&tensor_like(shape, &v[0])?, &with_flat(params, &v[1])?, &dy)?;
            Ok(vec![dx.into_data(), g.flatten()])
        },
    };
    numeric_gradcheck(&f, &[x.data().to_vec(), params.flatten()], eps)
}

/// Gradient check of a parameter-free map `x ↦ r · forward(x)`.
fn check_map<F, B>(x: &Tensor, forward: F, backward: B, seed: u64, eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
    B: Fn(&Tensor, &Tensor) -> Result<Tensor> + Sync,
{
    let shape = x.shape();
    let y = forward(x)?;
    let r = projection(y.len(), &mut seeded_rng(seed ^ 0xabcd));
    let out_shape = y.shape();
    let f = FnPair {
        value: |v: &[Vec<f64>]| Ok(dot(&r, forward(&tensor_like(shape, &v[0])?)?.data())),
        gradient: |v: &[Vec<f64>]| {
            let dy = Tensor::from_vec(out_shape, r.clone())?;
            Ok(vec![backward(&tensor_like(shape, &v[0])?, &dy)?.into_data()])
        },
    };
    numeric_gradcheck(&f, &[x.data().to_vec()], eps)
}

fn conv_backward_as_params(x: &Tensor, p: &ConvParams, dy: &Tensor) -> Result<(Tensor, ConvParams)> {
    let (dx, g) = conv2d_backward(x, p, dy)?;
    Ok((dx, p.gradient_like(g)))
}

fn check_conv(seed: u64, eps: f64) -> Result<GradcheckReport> {
    let mut rng = seeded_rng(seed);
    let x = Tensor::uniform([2, 3, 7, 6], 1.0, &mut rng);
    let p = ConvParams::init(4, 3, 3, 3, InitScheme::Uniform(1.0), &mut rng)
        .with_dilation(2)
        .with_padding(2)
        .with_stride(2);
    check_layer(&x, &p, conv2d_forward, conv_backward_as_params, seed, eps)
}

fn check_linear(seed: u64, eps: f64) -> Result<GradcheckReport> {
    let mut rng = seeded_rng(seed);
    let x = Tensor::uniform([1, 3, 4, 4], 1.0, &mut rng);
    let p = ConvParams::init(3, 3, 1, 1, InitScheme::Uniform(1.0), &mut rng);
    check_layer(&x, &p, conv2d_forward, conv_backward_as_params, seed, eps)
}

fn check_deconv(seed: u64, eps: f64) -> Result<GradcheckReport> {
    let mut rng = seeded_rng(seed);
    let x = Tensor::uniform([2, 3, 3, 4], 1.0, &mut rng);
    let p = ConvParams::init(2, 3, 2, 2, InitScheme::Uniform(1.0), &mut rng).with_stride(2);
    check_layer(
        &x,
        &p,
        deconv2d_forward,
        |x, p, dy| {
            let (dx, g) = deconv2d_backward(x, p, dy)?;
            Ok((dx, p.gradient_like(g)))
        },
        seed,
        eps,
    )
}

fn check_batchnorm(seed: u64, eps: f64) -> Result<GradcheckReport> {
    let mut rng = seeded_rng(seed);
    let x = Tensor::uniform([2, 3, 4, 3], 2.0, &mut rng);
    let mut p = BnParams::identity(3);
    for c in 0..3 {
        p.gamma[c] = rng.gen_range(0.5..2.0);
        p.beta[c] = rng.gen_range(-1.0..1.0);
        p.running_mean[c] = rng.gen_range(-1.0..1.0);
        p.running_var[c] = rng.gen_range(0.2..3.0);
    }
    check_layer(
        &x,
        &p,
        batchnorm_inference,
        |x, p, dy| {
            let (dx, g) = batchnorm_inference_backward(x, p, dy)?;
            Ok((dx, p.gradient_like(g)))
        },
        seed,
        eps,
    )
}

fn check_relu(seed: u64, eps: f64) -> Result<GradcheckReport> {
    let mut rng = seeded_rng(seed);
    // Magnitudes stay well clear of the kink relative to the probe step.
    let data = (0..48)
        .map(|_| {
            let m: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let x = Tensor::from_vec([1, 3, 4, 4], data)?;
    check_map(&x, |x| Ok(relu(x)), relu_backward, seed, eps)
}

fn check_gap(seed: u64, eps: f64) -> Result<GradcheckReport> {
    let x = Tensor::uniform([2, 3, 5, 4], 1.0, &mut seeded_rng(seed));
    check_map(&x, global_avg_pool, |x, dy| global_avg_pool_backward(x.shape(), dy), seed, eps)
}

fn check_bilinear(seed: u64, eps: f64) -> Result<GradcheckReport> {
    let x = Tensor::uniform([2, 2, 3, 5], 1.0, &mut seeded_rng(seed));
    let up = check_map(
        &x,
        |x| bilinear_resize(x, 7, 11),
        |x, dy| bilinear_resize_backward(x.shape(), dy),
        seed,
        eps,
    )?;
    let down = check_map(
        &x,
        |x| bilinear_resize(x, 2, 3),
        |x, dy| bilinear_resize_backward(x.shape(), dy),
        seed,
        eps,
    )?;
    Ok(worse(up, down))
}

fn worse(a: GradcheckReport, b: GradcheckReport) -> GradcheckReport {
    let entries = a.entries_checked + b.entries_checked;
    let mut w = if b.max_relative_error > a.max_relative_error { b } else { a };
    w.entries_checked = entries;
    w
}

fn check_softmax_ce(seed: u64, eps: f64) -> Result<GradcheckReport> {
    let mut rng = seeded_rng(seed);
    let shape = [2, 4, 3, 3];
    let logits = Tensor::uniform(shape, 2.0, &mut rng);
    let labels: Vec<u16> = (0..18)
        .map(|_| if rng.gen_bool(0.2) { IGNORE_LABEL } else { rng.gen_range(0..4) })
        .collect();
    let f = FnPair {
        value: |v: &[Vec<f64>]| Ok(softmax_cross_entropy(&tensor_like(shape, &v[0])?, &labels)?.0),
        gradient: |v: &[Vec<f64>]| Ok(vec![softmax_cross_entropy(&tensor_like(shape, &v[0])?, &labels)?.1.into_data()]),
    };
    numeric_gradcheck(&f, &[logits.into_data()], eps)
}

fn check_roi_align(seed: u64, eps: f64) -> Result<GradcheckReport> {
    let mut rng = seeded_rng(seed);
    let feature = Tensor::uniform([1, 2, 9, 8], 1.0, &mut rng);
    let mut worst: Option<GradcheckReport> = None;
    // One interior box and one that overshoots the border.
    for b in [
        RoiBox::new(3.3, 2.1, 11.7, 14.9, 0.9)?,
        RoiBox::new(-4.0, 20.5, 19.0, 40.0, 0.4)?,
    ] {
        let r = check_map(
            &feature,
            |f| roi_align(f, &b, 2, 3, 2),
            |f, dy| roi_align_backward(f.shape(), &b, 2, 3, 2, dy),
            seed,
            eps,
        )?;
        worst = Some(match worst {
            None => r,
            Some(w) => worse(w, r),
        });
    }
    Ok(worst.expect("two boxes checked"))
}

fn check_nonlocal(seed: u64, eps: f64) -> Result<GradcheckReport> {
    let mut rng = seeded_rng(seed);
    let mut p = NonLocalParams::init(3, InitScheme::FanIn, &mut rng);
    p.randomize_bn(&mut rng);
    let x = Tensor::uniform([2, 3, 3, 4], 1.0, &mut rng);
    check_layer(&x, &p, nonlocal_forward, nonlocal_backward, seed, eps)
}

fn check_aspp(seed: u64, eps: f64) -> Result<GradcheckReport> {
    let mut rng = seeded_rng(seed);
    let p = AsppParams::init(3, InitScheme::FanIn, &mut rng);
    let x = draw_clear_of_kinks([1, 3, 7, 7], &mut rng, |x| aspp_relu_margin(x, &p))?;
    check_layer(&x, &p, aspp_forward, aspp_backward, seed, eps)
}

fn check_gce(seed: u64, eps: f64) -> Result<GradcheckReport> {
    let mut rng = seeded_rng(seed);
    let mut p = GceParams::init(3, InitScheme::FanIn, &mut rng);
    p.nonlocal.randomize_bn(&mut rng);
    let x = draw_clear_of_kinks([1, 3, 6, 6], &mut rng, |x| gce_relu_margin(x, &p))?;
    check_layer(&x, &p, gce_forward, gce_backward, seed, eps)
}

/// Toy widths for branch checks: 3 input channels, 4-wide convolutions and a
/// 3-wide GCE (so the 4 → 3 transition is exercised), R = 14, two classes.
pub fn toy_branch_config(variant: Variant) -> BranchConfig {
    BranchConfig::new(variant, 14, 2).with_widths(3, 4, 3)
}

fn check_branch(variant: Variant, seed: u64, eps: f64) -> Result<GradcheckReport> {
    let cfg = toy_branch_config(variant);
    let mut branch = build_branch_with(&cfg, seed, InitScheme::FanIn)?;
    let mut rng = seeded_rng(seed ^ 0x77);
    for stage in &mut branch.body {
        if let Stage::Gce(p) = stage {
            p.nonlocal.randomize_bn(&mut rng);
        }
    }
    let r = cfg.roi_resolution;
    let shape = [1, cfg.in_channels, r, r];
    let x = draw_clear_of_kinks(shape, &mut rng, |x| branch.relu_margin(x))?;
    let out = cfg.output_resolution();
    let labels: Vec<u16> = (0..out * out).map(|_| rng.gen_range(0..cfg.num_classes as u16)).collect();
    let rebuild = |flat: &[f64]| -> Result<Branch> { with_flat(&branch, flat) };
    let f = FnPair {
        value: |v: &[Vec<f64>]| {
            let b = rebuild(&v[1])?;
            let logits = b.forward(&tensor_like(shape, &v[0])?)?.logits;
            Ok(softmax_cross_entropy(&logits, &labels)?.0)
        },
        gradient: |v: &[Vec<f64>]| {
            let b = rebuild(&v[1])?;
            let x = tensor_like(shape, &v[0])?;
            let logits = b.forward(&x)?.logits;
            let (_, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            let (dx, g) = b.backward(&x, &dlogits)?;
            Ok(vec![dx.into_data(), g.flatten()])
        },
    };
    numeric_gradcheck(&f, &[x.into_data(), branch.flatten()], eps)
}
