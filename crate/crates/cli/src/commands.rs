//! One function per subcommand. Each returns the JSON report and the exit
//! code; human-readable summary lines go to `log`.

use crate::config::{required, ConfigFile};
use crate::error::{CliError, CliResult};
use crate::formats::{paired_ids, AnnotationSet};
use prcnn_core::branch::{bench_forward, branch_param_count, BenchReport, BranchConfig, ParamCount, Variant};
use prcnn_core::gradcheck::targets::{self, Tier};
use prcnn_core::gradcheck::GradcheckReport;
use prcnn_core::metrics::{
    evaluate_densepose, evaluate_parsing, DensePosePair, DensePoseReport, DistanceSource, GeodesicTable, GpsConfig,
    ParsingPair, ParsingReport, PcpMode, DEFAULT_KAPPA,
};
use prcnn_core::roi::{relative_scale, scale_cdf, RoiBox, ScaleMeasure};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Header shared by every report.
#[derive(Serialize)]
pub struct Report<T: Serialize> {
    pub command: &'static str,
    pub seed: u64,
    #[serde(flatten)]
    pub body: T,
}

pub struct Finished {
    pub json: String,
    pub code: i32,
}

pub fn finish<T: Serialize>(command: &'static str, seed: u64, body: T, code: i32) -> CliResult<Finished> {
    let mut json = serde_json::to_string_pretty(&Report { command, seed, body })
        .map_err(|e| CliError::Usage(format!("cannot serialize report: {e}")))?;
    json.push('\n');
    Ok(Finished { json, code })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub targets: Option<Vec<String>>,
    pub tolerance: Option<f64>,
}

#[derive(Serialize)]
struct TargetResult {
    target: String,
    tier: Tier,
    tolerance: f64,
    passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    check: Option<GradcheckReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct GradcheckBody {
    tolerance_override: Option<f64>,
    passed: bool,
    targets: Vec<TargetResult>,
}

/// Runs every named target; no names means all of them. Each target must
/// beat its tier's tolerance, or `tolerance` when given.
pub fn gradcheck(names: Vec<String>, tolerance: Option<f64>, cfg: &ConfigFile, seed: u64, log: &mut String) -> CliResult<Finished> {
    let file: GradcheckConfig = cfg.command("gradcheck")?;
    let tolerance = tolerance.or(file.tolerance);
    if let Some(t) = tolerance {
        if !(t > 0.0 && t.is_finite()) {
            return Err(CliError::Usage(format!("--tolerance must be positive, got {t}")));
        }
    }
    let mut names = if names.is_empty() { file.targets.unwrap_or_default() } else { names };
    if names.is_empty() {
        names = targets::names();
    }
    let unknown: Vec<&String> = names.iter().filter(|n| targets::tier_of(n).is_none()).collect();
    if !unknown.is_empty() {
        return Err(CliError::Usage(format!(
            "unknown gradcheck target(s) {unknown:?}; known: {}",
            targets::names().join(", ")
        )));
    }
    let mut results = Vec::with_capacity(names.len());
    for name in names {
        let tier = targets::tier_of(&name).expect("checked above");
        let limit = tolerance.unwrap_or(tier.tolerance());
        let (check, error) = match targets::run(&name, seed) {
            Ok(o) => (Some(o.report), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let passed = check.as_ref().is_some_and(|c| c.max_relative_error < limit);
        let _ = match (&check, &error) {
            (Some(c), _) => writeln!(
                log,
                "{:<28} {:>11.3e}  (limit {limit:.0e})  {}",
                name,
                c.max_relative_error,
                if passed { "ok" } else { "FAIL" }
            ),
            (None, Some(e)) => writeln!(log, "{name:<28} error: {e}"),
            _ => Ok(()),
        };
        results.push(TargetResult {
            target: name,
            tier,
            tolerance: limit,
            passed,
            check,
            error,
        });
    }
    let passed = results.iter().all(|r| r.passed);
    let body = GradcheckBody {
        tolerance_override: tolerance,
        passed,
        targets: results,
    };
    finish("gradcheck", seed, body, if passed { EXIT_OK } else { EXIT_FAILED })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalParsingConfig {
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub num_classes: Option<usize>,
    pub pcp_mode: Option<PcpMode>,
}

pub struct EvalParsingArgs {
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub num_classes: Option<usize>,
    pub pcp_mode: Option<PcpMode>,
}

pub fn eval_parsing(args: EvalParsingArgs, cfg: &ConfigFile, seed: u64, log: &mut String) -> CliResult<Finished> {
    let file: EvalParsingConfig = cfg.command("eval-parsing")?;
    let pred = required(args.pred, file.pred.map(|p| cfg.resolve(p)), "pred")?;
    let gt = required(args.gt, file.gt.map(|p| cfg.resolve(p)), "gt")?;
    let num_classes = required(args.num_classes, file.num_classes, "num-classes")?;
    let mode = args.pcp_mode.or(file.pcp_mode).unwrap_or_default();

    let (pred, gt) = (AnnotationSet::load(&pred)?, AnnotationSet::load(&gt)?);
    let pairs = paired_ids(&pred, &gt)?
        .into_iter()
        .map(|id| {
            let (p, g) = (pred.get(id).expect("paired"), gt.get(id).expect("paired"));
            if (p.width, p.height) != (g.width, g.height) {
                return Err(CliError::Usage(format!(
                    "image '{id}': prediction is {}x{}, ground truth {}x{}",
                    p.width, p.height, g.width, g.height
                )));
            }
            Ok(ParsingPair {
                id: id.to_string(),
                width: g.width,
                height: g.height,
                preds: p.parsing_instances(&pred.path)?,
                gts: g.parsing_instances(&gt.path)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report: ParsingReport = evaluate_parsing(&pairs, num_classes, mode)?;
    let a = &report.aggregate;
    let _ = writeln!(
        log,
        "{} images  mIoU {}  AP^p_50 {:.4}  AP^p_vol {:.4}  PCP_50 {:.4}",
        pairs.len(),
        fmt_opt(a.miou),
        a.ap_p_50,
        a.ap_p_vol,
        a.pcp_50
    );
    finish("eval-parsing", seed, report, EXIT_OK)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDensePoseConfig {
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub kappa: Option<f64>,
    /// Geodesic distance table; Euclidean UV distance when absent.
    pub geodesics: Option<PathBuf>,
}

pub struct EvalDensePoseArgs {
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub kappa: Option<f64>,
    pub geodesics: Option<PathBuf>,
}

pub fn eval_densepose(args: EvalDensePoseArgs, cfg: &ConfigFile, seed: u64, log: &mut String) -> CliResult<Finished> {
    let file: EvalDensePoseConfig = cfg.command("eval-densepose")?;
    let pred = required(args.pred, file.pred.map(|p| cfg.resolve(p)), "pred")?;
    let gt = required(args.gt, file.gt.map(|p| cfg.resolve(p)), "gt")?;
    let kappa = args.kappa.or(file.kappa).unwrap_or(DEFAULT_KAPPA);
    let distance = match args.geodesics.or(file.geodesics.map(|p| cfg.resolve(p))) {
        None => DistanceSource::EuclideanUv,
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let table: GeodesicTable =
                serde_json::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))?;
            DistanceSource::Lookup(table)
        }
    };
    let gps = GpsConfig { kappa, distance };
    gps.validate()?;

    let (pred, gt) = (AnnotationSet::load(&pred)?, AnnotationSet::load(&gt)?);
    let pairs = paired_ids(&pred, &gt)?
        .into_iter()
        .map(|id| {
            Ok(DensePosePair {
                id: id.to_string(),
                preds: pred.get(id).expect("paired").densepose_instances(&pred.path)?,
                gts: gt.get(id).expect("paired").densepose_instances(&gt.path)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report: DensePoseReport = evaluate_densepose(&pairs, &gps)?;
    let a = &report.aggregate;
    let _ = writeln!(
        log,
        "{} images  AP {:.4}  AP50 {:.4}  AP75 {:.4}  (kappa {kappa})",
        pairs.len(),
        a.ap,
        a.ap50,
        a.ap75
    );
    finish("eval-densepose", seed, report, EXIT_OK)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub roi_resolution: Option<usize>,
    pub num_classes: Option<usize>,
}

#[derive(Serialize)]
struct VariantParams {
    variant: Variant,
    body: usize,
    tail: usize,
    total: usize,
}

#[derive(Serialize)]
struct Comparison {
    gce_body: usize,
    baseline_body: usize,
    ratio: f64,
    verdict: &'static str,
}

#[derive(Serialize)]
struct ParamsBody {
    roi_resolution: usize,
    num_classes: usize,
    variants: Vec<VariantParams>,
    comparison: Comparison,
}

/// Parameter counts of every variant at full width, and whether the GCE
/// block alone is lighter than the eight-conv stack it replaces.
pub fn params(roi: Option<usize>, classes: Option<usize>, cfg: &ConfigFile, seed: u64, log: &mut String) -> CliResult<Finished> {
    let file: ParamsConfig = cfg.command("params")?;
    let roi_resolution = roi.or(file.roi_resolution).unwrap_or(14);
    let num_classes = classes.or(file.num_classes).unwrap_or(20);
    let mut variants = Vec::new();
    let _ = writeln!(log, "{:<18} {:>12} {:>10} {:>12}", "variant", "body", "tail", "total");
    for v in Variant::ALL {
        let c: ParamCount = branch_param_count(&BranchConfig::new(v, roi_resolution, num_classes))?;
        let _ = writeln!(log, "{:<18} {:>12} {:>10} {:>12}", v.name(), c.body, c.tail, c.total());
        variants.push(VariantParams {
            variant: v,
            body: c.body,
            tail: c.tail,
            total: c.total(),
        });
    }
    let body_of = |v: Variant| variants.iter().find(|p| p.variant == v).expect("all variants").body;
    let (gce_body, baseline_body) = (body_of(Variant::GceOnly), body_of(Variant::Baseline8Conv));
    let comparison = Comparison {
        gce_body,
        baseline_body,
        ratio: gce_body as f64 / baseline_body as f64,
        verdict: if gce_body < baseline_body { "lighter" } else { "not lighter" },
    };
    let _ = writeln!(
        log,
        "GCE body {gce_body} vs 8-conv body {baseline_body}: {} ({:.3}x)",
        comparison.verdict, comparison.ratio
    );
    let body = ParamsBody {
        roi_resolution,
        num_classes,
        variants,
        comparison,
    };
    finish("params", seed, body, EXIT_OK)
}

// ---------------------------------------------------------------------------

/// Channel widths used by `bench` unless full width is requested. Small
/// enough that every variant runs in well under a second per pass.
pub const BENCH_WIDTHS: (usize, usize, usize) = (16, 32, 16);

/// End-to-end detector slowdown reported for moving the parsing RoI from
/// 14×14 to 32×32.
pub const REFERENCE_DETECTOR_SLOWDOWN: f64 = 0.12;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub roi_resolutions: Vec<usize>,
    pub num_classes: usize,
    pub batch: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub full_width: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            variants: vec![Variant::GceConv4],
            roi_resolutions: vec![14, 32],
            num_classes: 20,
            batch: 1,
            repeats: 5,
            warmup: 1,
            full_width: false,
        }
    }
}

pub struct BenchArgs {
    pub variants: Vec<Variant>,
    pub roi_resolutions: Vec<usize>,
    pub batch: Option<usize>,
    pub repeats: Option<usize>,
    pub warmup: Option<usize>,
    pub full_width: bool,
}

#[derive(Serialize)]
struct ResolutionRatio {
    variant: Variant,
    from: usize,
    to: usize,
    /// Mean latency at `to` over mean latency at `from`.
    ratio: f64,
    slower: bool,
}

#[derive(Serialize)]
struct BenchBody {
    full_width: bool,
    results: Vec<BenchReport>,
    ratios: Vec<ResolutionRatio>,
    reference_detector_slowdown: f64,
    note: &'static str,
}

pub fn bench(args: BenchArgs, cfg: &ConfigFile, seed: u64, log: &mut String) -> CliResult<Finished> {
    let mut c: BenchConfig = cfg.command("bench")?;
    if !args.variants.is_empty() {
        c.variants = args.variants;
    }
    if !args.roi_resolutions.is_empty() {
        c.roi_resolutions = args.roi_resolutions;
    }
    c.batch = args.batch.unwrap_or(c.batch);
    c.repeats = args.repeats.unwrap_or(c.repeats);
    c.warmup = args.warmup.unwrap_or(c.warmup);
    c.full_width |= args.full_width;
    if c.variants.is_empty() || c.roi_resolutions.is_empty() || c.batch == 0 {
        return Err(CliError::Usage("bench needs at least one variant, one resolution and a positive batch".into()));
    }

    let mut results = Vec::new();
    for &v in &c.variants {
        for &r in &c.roi_resolutions {
            let mut bc = BranchConfig::new(v, r, c.num_classes);
            if !c.full_width {
                bc = bc.with_widths(BENCH_WIDTHS.0, BENCH_WIDTHS.1, BENCH_WIDTHS.2);
            }
            let rep = bench_forward(&bc, c.batch, c.repeats, c.warmup, seed)?;
            let _ = writeln!(
                log,
                "{:<18} R={:<3} mean {:>9.3} ms  p50 {:>9.3} ms  p95 {:>9.3} ms  ({} samples)",
                v.name(),
                r,
                rep.mean_ms,
                rep.p50_ms,
                rep.p95_ms,
                rep.samples_ms.len()
            );
            results.push(rep);
        }
    }
    let mut ratios = Vec::new();
    for &v in &c.variants {
        let mean_at = |r: usize| {
            results
                .iter()
                .find(|b| b.config.variant == v && b.config.roi_resolution == r)
                .map(|b| b.mean_ms)
        };
        if let (Some(lo), Some(hi)) = (mean_at(14), mean_at(32)) {
            let ratio = hi / lo;
            let _ = writeln!(
                log,
                "{}: R=32 / R=14 = {ratio:.2}x (whole-detector reference slowdown {:.0}%, not directly comparable)",
                v.name(),
                REFERENCE_DETECTOR_SLOWDOWN * 100.0
            );
            ratios.push(ResolutionRatio {
                variant: v,
                from: 14,
                to: 32,
                ratio,
                slower: ratio > 1.0,
            });
        }
    }
    let body = BenchBody {
        full_width: c.full_width,
        results,
        ratios,
        reference_detector_slowdown: REFERENCE_DETECTOR_SLOWDOWN,
        note: "the reference figure is the end-to-end detector slowdown on a GPU; this benchmark times the parsing branch alone on the CPU",
    };
    finish("bench", seed, body, EXIT_OK)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleCdfConfig {
    pub gt: Option<PathBuf>,
    pub grid: Option<Vec<f64>>,
    pub measure: Option<ScaleMeasure>,
}

#[derive(Serialize)]
struct CdfRow {
    scale: f64,
    fraction: f64,
}

#[derive(Serialize)]
struct ScaleCdfBody {
    measure: ScaleMeasure,
    instances: usize,
    rows: Vec<CdfRow>,
}

pub fn scale_cdf_cmd(
    gt: Option<PathBuf>,
    grid: Option<Vec<f64>>,
    measure: Option<ScaleMeasure>,
    cfg: &ConfigFile,
    seed: u64,
    log: &mut String,
) -> CliResult<Finished> {
    let file: ScaleCdfConfig = cfg.command("scale-cdf")?;
    let gt = required(gt, file.gt.map(|p| cfg.resolve(p)), "gt")?;
    let grid = required(grid, file.grid, "grid")?;
    let measure = measure.or(file.measure).unwrap_or_default();
    let set = AnnotationSet::load(&gt)?;
    let mut scales = Vec::new();
    for img in &set.images {
        for inst in &img.instances {
            let [x1, y1, x2, y2] = inst.bbox;
            let b = RoiBox::new(x1, y1, x2, y2, inst.score)?.clamp_to(img.width as f64, img.height as f64);
            scales.push(relative_scale(&b, img.width as f64, img.height as f64, measure)?);
        }
    }
    let rows: Vec<CdfRow> = scale_cdf(&scales, &grid)?
        .into_iter()
        .map(|(scale, fraction)| CdfRow { scale, fraction })
        .collect();
    for r in &rows {
        let _ = writeln!(log, "{:>10.4} {:>8.4}", r.scale, r.fraction);
    }
    let body = ScaleCdfBody {
        measure,
        instances: scales.len(),
        rows,
    };
    finish("scale-cdf", seed, body, EXIT_OK)
}
