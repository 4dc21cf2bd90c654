//! Complete parsing-branch topologies: the eight-conv baseline and the
//! before-GCE / GCE / after-GCE decoupled variants.
//!
//! Every variant ends in the same tail: a 2×2 stride-2 deconvolution with
//! relu, a 1×1 classifier and a 2× bilinear upsample, so an `R × R` RoI
//! produces `4R × 4R` logits.

use crate::error::{check_dim, invalid, Result};
use crate::gce::{gce_backward, gce_forward, gce_relu_margin, GceParams, GCE_CHANNELS};
use crate::params::{seeded_rng, InitScheme, Parameters};
use crate::tensor::{
    bilinear_resize, bilinear_resize_backward, conv2d_backward, conv2d_forward, deconv2d_backward,
    deconv2d_forward, relu, relu_backward, ConvParams, Tensor,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Eight 3×3 convolutions.
    Baseline8Conv,
    GceOnly,
    /// Four convolutions, then GCE.
    Conv4Gce,
    /// GCE, then four convolutions.
    GceConv4,
    Conv4GceConv4,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline8Conv,
        Variant::GceOnly,
        Variant::Conv4Gce,
        Variant::GceConv4,
        Variant::Conv4GceConv4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline8Conv => "baseline_8conv",
            Variant::GceOnly => "gce_only",
            Variant::Conv4Gce => "conv4_gce",
            Variant::GceConv4 => "gce_conv4",
            Variant::Conv4GceConv4 => "conv4_gce_conv4",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '+', ' '], "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key || format!("{v:?}").to_ascii_lowercase() == key)
            .map_or_else(|| invalid("variant", format!("unknown branch variant '{s}'")), Ok)
    }
}

pub const ROI_RESOLUTIONS: [usize; 3] = [14, 32, 64];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub variant: Variant,
    pub roi_resolution: usize,
    pub num_classes: usize,
    /// Channels of the pooled RoI features.
    pub in_channels: usize,
    /// Width of the plain 3×3 convolutions.
    pub conv_width: usize,
    /// Width of every convolution inside GCE.
    pub gce_width: usize,
}

impl BranchConfig {
    /// The full-size head: 256-channel input, 512-wide convolutions, 256-wide GCE.
    pub fn new(variant: Variant, roi_resolution: usize, num_classes: usize) -> Self {
        Self {
            variant,
            roi_resolution,
            num_classes,
            in_channels: 256,
            conv_width: 512,
            gce_width: GCE_CHANNELS,
        }
    }

    pub fn with_widths(mut self, in_channels: usize, conv_width: usize, gce_width: usize) -> Self {
        self.in_channels = in_channels;
        self.conv_width = conv_width;
        self.gce_width = gce_width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !ROI_RESOLUTIONS.contains(&self.roi_resolution) {
            return invalid(
                "branch_config",
                format!("roi_resolution must be one of {ROI_RESOLUTIONS:?}, got {}", self.roi_resolution),
            );
        }
        if self.num_classes < 2 {
            return invalid("branch_config", "num_classes must be at least 2");
        }
        if self.in_channels == 0 || self.conv_width == 0 || self.gce_width == 0 {
            return invalid("branch_config", "channel widths must be positive");
        }
        Ok(())
    }

    pub fn output_resolution(&self) -> usize {
        4 * self.roi_resolution
    }

    /// Shapes of the body stages in execution order.
    fn layout(&self) -> Vec<StageSpec> {
        let mut stages = Vec::new();
        let mut channels = self.in_channels;
        let convs = |stages: &mut Vec<StageSpec>, channels: &mut usize, count: usize| {
            for _ in 0..count {
                stages.push(StageSpec::Conv {
                    c_in: *channels,
                    c_out: self.conv_width,
                });
                *channels = self.conv_width;
            }
        };
        let gce = |stages: &mut Vec<StageSpec>, channels: &mut usize| {
            if *channels != self.gce_width {
                stages.push(StageSpec::Transition {
                    c_in: *channels,
                    c_out: self.gce_width,
                });
            }
            stages.push(StageSpec::Gce { width: self.gce_width });
            *channels = self.gce_width;
        };
        match self.variant {
            Variant::Baseline8Conv => convs(&mut stages, &mut channels, 8),
            Variant::GceOnly => gce(&mut stages, &mut channels),
            Variant::Conv4Gce => {
                convs(&mut stages, &mut channels, 4);
                gce(&mut stages, &mut channels);
            }
            Variant::GceConv4 => {
                gce(&mut stages, &mut channels);
                convs(&mut stages, &mut channels, 4);
            }
            Variant::Conv4GceConv4 => {
                convs(&mut stages, &mut channels, 4);
                gce(&mut stages, &mut channels);
                convs(&mut stages, &mut channels, 4);
            }
        }
        stages
    }

    fn body_channels(&self) -> usize {
        match self.layout().last() {
            Some(StageSpec::Conv { c_out, .. } | StageSpec::Transition { c_out, .. }) => *c_out,
            Some(StageSpec::Gce { width }) => *width,
            None => self.in_channels,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum StageSpec {
    Conv { c_in: usize, c_out: usize },
    Transition { c_in: usize, c_out: usize },
    Gce { width: usize },
}

impl StageSpec {
    fn param_count(self) -> usize {
        match self {
            StageSpec::Conv { c_in, c_out } => 9 * c_in * c_out + c_out,
            StageSpec::Transition { c_in, c_out } => c_in * c_out + c_out,
            // ASPP: 1×1, three 3×3, image 1×1, fuse 5w→w. Non-local: four 1×1 and BN affine.
            StageSpec::Gce { width: w } => {
                let pointwise = w * w + w;
                let atrous = 9 * w * w + w;
                let fuse = 5 * w * w + w;
                (2 * pointwise + 3 * atrous + fuse) + (4 * pointwise + 2 * w)
            }
        }
    }
}

/// One body stage. Convolution and transition stages apply relu after the
/// convolution.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Conv(ConvParams),
    Transition(ConvParams),
    Gce(GceParams),
}

impl Parameters for Stage {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        match self {
            Stage::Conv(p) | Stage::Transition(p) => p.visit(f),
            Stage::Gce(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        match self {
            Stage::Conv(p) | Stage::Transition(p) => p.visit_mut(f),
            Stage::Gce(p) => p.visit_mut(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tail {
    pub deconv: ConvParams,
    pub classifier: ConvParams,
}

impl Parameters for Tail {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.deconv.visit(f);
        self.classifier.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.deconv.visit_mut(f);
        self.classifier.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub config: BranchConfig,
    pub body: Vec<Stage>,
    pub tail: Tail,
}

impl Parameters for Branch {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.body.visit(f);
        self.tail.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.body.visit_mut(f);
        self.tail.visit_mut(f);
    }
}

/// Builds a branch with weights drawn uniformly in `[-0.01, 0.01)`.
pub fn build_branch(cfg: &BranchConfig, seed: u64) -> Result<Branch> {
    build_branch_with(cfg, seed, InitScheme::default())
}

pub fn build_branch_with(cfg: &BranchConfig, seed: u64, scheme: InitScheme) -> Result<Branch> {
    cfg.validate()?;
    let mut rng = seeded_rng(seed);
    let body = cfg
        .layout()
        .into_iter()
        .map(|spec| build_stage(spec, scheme, &mut rng))
        .collect();
    let c = cfg.body_channels();
    let tail = Tail {
        deconv: ConvParams::init(c, c, 2, 2, scheme, &mut rng).with_stride(2),
        classifier: ConvParams::init(cfg.num_classes, c, 1, 1, scheme, &mut rng),
    };
    Ok(Branch {
        config: *cfg,
        body,
        tail,
    })
}

fn build_stage<R: Rng + ?Sized>(spec: StageSpec, scheme: InitScheme, rng: &mut R) -> Stage {
    match spec {
        StageSpec::Conv { c_in, c_out } => Stage::Conv(ConvParams::init(c_out, c_in, 3, 3, scheme, rng).with_padding(1)),
        StageSpec::Transition { c_in, c_out } => Stage::Transition(ConvParams::init(c_out, c_in, 1, 1, scheme, rng)),
        StageSpec::Gce { width } => Stage::Gce(GceParams::init(width, scheme, rng)),
    }
}

/// Per-RoI logits `[n, num_classes, 4R, 4R]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput {
    pub logits: Tensor,
}

/// Intermediate values of one forward pass, kept for the backward pass.
struct Trace {
    /// Input to each body stage, then the body output.
    stage_inputs: Vec<Tensor>,
    conv_pre: Vec<Option<Tensor>>,
    deconv_pre: Tensor,
    deconv_act: Tensor,
    class_map: Tensor,
}

impl Branch {
    fn check_input(&self, pooled: &Tensor) -> Result<()> {
        let cfg = &self.config;
        check_dim("branch_forward", "input channels", cfg.in_channels, pooled.c())?;
        check_dim("branch_forward", "RoI height", cfg.roi_resolution, pooled.h())?;
        check_dim("branch_forward", "RoI width", cfg.roi_resolution, pooled.w())?;
        pooled.ensure_finite("branch_forward")
    }

    fn trace(&self, pooled: &Tensor) -> Result<(Tensor, Trace)> {
        self.check_input(pooled)?;
        let mut stage_inputs = vec![pooled.clone()];
        let mut conv_pre = Vec::with_capacity(self.body.len());
        for stage in &self.body {
            let x = stage_inputs.last().expect("stage input");
            let (y, pre) = match stage {
                Stage::Conv(p) | Stage::Transition(p) => {
                    let pre = conv2d_forward(x, p)?;
                    (relu(&pre), Some(pre))
                }
                Stage::Gce(p) => (gce_forward(x, p)?, None),
            };
            conv_pre.push(pre);
            stage_inputs.push(y);
        }
        let body_out = stage_inputs.last().expect("body output");
        let deconv_pre = deconv2d_forward(body_out, &self.tail.deconv)?;
        let deconv_act = relu(&deconv_pre);
        let class_map = conv2d_forward(&deconv_act, &self.tail.classifier)?;
        let out = self.config.output_resolution();
        let logits = bilinear_resize(&class_map, out, out)?;
        Ok((
            logits,
            Trace {
                stage_inputs,
                conv_pre,
                deconv_pre,
                deconv_act,
                class_map,
            },
        ))
    }

    /// Runs the branch on pooled RoI features `[n, in_channels, R, R]`.
    pub fn forward(&self, pooled: &Tensor) -> Result<BranchOutput> {
        self.check_input(pooled)?;
        if pooled.n() == 0 {
            let out = self.config.output_resolution();
            return Ok(BranchOutput {
                logits: Tensor::zeros([0, self.config.num_classes, out, out]),
            });
        }
        Ok(BranchOutput {
            logits: self.trace(pooled)?.0,
        })
    }

    /// Smallest |pre-activation| over every relu in the branch for this input.
    pub fn relu_margin(&self, pooled: &Tensor) -> Result<f64> {
        let (_, t) = self.trace(pooled)?;
        let min_abs = |t: &Tensor| t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let mut margin = min_abs(&t.deconv_pre);
        for (i, stage) in self.body.iter().enumerate() {
            margin = margin.min(match (stage, &t.conv_pre[i]) {
                (Stage::Gce(p), _) => gce_relu_margin(&t.stage_inputs[i], p)?,
                (_, Some(pre)) => min_abs(pre),
                (_, None) => f64::INFINITY,
            });
        }
        Ok(margin)
    }

    /// Gradients with respect to the pooled input and every parameter, given
    /// the upstream gradient of the logits.
    pub fn backward(&self, pooled: &Tensor, dlogits: &Tensor) -> Result<(Tensor, Branch)> {
        let (logits, t) = self.trace(pooled)?;
        if dlogits.shape() != logits.shape() {
            return invalid("branch_backward", "upstream gradient shape differs from logits");
        }
        let mut grads = self.clone();
        let dclass = bilinear_resize_backward(t.class_map.shape(), dlogits)?;
        let (dact, gcls) = conv2d_backward(&t.deconv_act, &self.tail.classifier, &dclass)?;
        grads.tail.classifier = self.tail.classifier.gradient_like(gcls);
        let dpre = relu_backward(&t.deconv_pre, &dact)?;
        let body_out = t.stage_inputs.last().expect("body output");
        let (mut dx, gdec) = deconv2d_backward(body_out, &self.tail.deconv, &dpre)?;
        grads.tail.deconv = self.tail.deconv.gradient_like(gdec);

        for (i, stage) in self.body.iter().enumerate().rev() {
            let x = &t.stage_inputs[i];
            let (dxi, g) = match stage {
                Stage::Conv(p) | Stage::Transition(p) => {
                    let pre = t.conv_pre[i].as_ref().expect("conv pre-activation");
                    let dpre = relu_backward(pre, &dx)?;
                    let (dxi, g) = conv2d_backward(x, p, &dpre)?;
                    let g = p.gradient_like(g);
                    (dxi, if matches!(stage, Stage::Conv(_)) { Stage::Conv(g) } else { Stage::Transition(g) })
                }
                Stage::Gce(p) => {
                    let (dxi, g) = gce_backward(x, p, &dx)?;
                    (dxi, Stage::Gce(g))
                }
            };
            grads.body[i] = g;
            dx = dxi;
        }
        Ok((dx, grads))
    }
}

/// Convenience wrapper around [`Branch::forward`].
pub fn branch_forward(branch: &Branch, pooled: &Tensor) -> Result<BranchOutput> {
    branch.forward(pooled)
}

pub fn branch_backward(branch: &Branch, pooled: &Tensor, dlogits: &Tensor) -> Result<(Tensor, Branch)> {
    branch.backward(pooled, dlogits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// Everything before the shared tail, including any transition conv.
    pub body: usize,
    /// Deconvolution plus classifier.
    pub tail: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.body + self.tail
    }
}

/// Exact parameter count from the declared layer shapes, without building
/// the weights.
pub fn branch_param_count(cfg: &BranchConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let body = cfg.layout().into_iter().map(StageSpec::param_count).sum();
    let c = cfg.body_channels();
    let tail = (4 * c * c + c) + (cfg.num_classes * c + cfg.num_classes);
    Ok(ParamCount { body, tail })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BranchConfig,
    pub batch: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

/// Nearest-rank percentile of an ascending sample.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Wall-clock forward latency on seeded synthetic RoIs. Warm-up runs are
/// excluded from the statistics.
pub fn bench_forward(cfg: &BranchConfig, batch: usize, repeats: usize, warmup: usize, seed: u64) -> Result<BenchReport> {
    if repeats < 3 {
        return invalid("bench_forward", format!("repeats must be at least 3, got {repeats}"));
    }
    let branch = build_branch(cfg, seed)?;
    let r = cfg.roi_resolution;
    let input = Tensor::uniform([batch, cfg.in_channels, r, r], 1.0, &mut seeded_rng(seed ^ 0x5eed));
    for _ in 0..warmup {
        branch.forward(&input)?;
    }
    let mut samples_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = branch.forward(&input)?;
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let mut sorted = samples_ms.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BenchReport {
        config: *cfg,
        batch,
        warmup,
        repeats,
        seed,
        mean_ms: samples_ms.iter().sum::<f64>() / repeats as f64,
        p50_ms: percentile(&sorted, 0.5),
        p95_ms: percentile(&sorted, 0.95),
        samples_ms,
    })
}
