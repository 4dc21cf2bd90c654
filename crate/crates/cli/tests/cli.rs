use prcnn_cli::{run, Outcome};
use serde_json::Value;
use std::path::{Path, PathBuf};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn prcnn(args: &[&str]) -> Outcome {
    run(std::iter::once("prcnn").chain(args.iter().copied()))
}

fn json(o: &Outcome) -> Value {
    assert_eq!(o.code, 0, "stderr: {}", o.stderr);
    serde_json::from_str(&o.stdout).expect("stdout is JSON")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn assert_close(got: &Value, want: &Value, what: &str) {
    let (g, w) = (got.as_f64().unwrap(), want.as_f64().unwrap());
    assert!((g - w).abs() <= 1e-12, "{what}: {g} vs {w}");
}

fn eval_parsing(pred: &Path, gt: &Path) -> Outcome {
    prcnn(&[
        "eval-parsing",
        "--pred",
        pred.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--num-classes",
        "4",
    ])
}

fn eval_densepose(pred: &str) -> Value {
    json(&prcnn(&[
        "eval-densepose",
        "--pred",
        fixture(pred).to_str().unwrap(),
        "--gt",
        fixture("densepose_gt.json").to_str().unwrap(),
    ]))
}

#[test]
fn eval_parsing_matches_golden() {
    let got = json(&eval_parsing(&fixture("parsing_pred.json"), &fixture("parsing_gt.json")));
    let want = read_json(&fixture("parsing_golden.json"));
    assert_eq!(got["command"], "eval-parsing");
    assert_eq!(got["pcp_mode"], "global");
    let (gi, wi) = (got["images"].as_array().unwrap(), want["images"].as_array().unwrap());
    assert_eq!(gi.len(), wi.len());
    for (g, w) in gi.iter().zip(wi) {
        assert_eq!(g["id"], w["id"]);
        for key in ["miou", "ap_p_50", "ap_p_vol", "pcp_50"] {
            assert_close(&g[key], &w[key], &format!("{} {key}", w["id"]));
        }
    }
    for key in ["miou", "ap_p_50", "ap_p_vol", "pcp_50"] {
        assert_close(&got["aggregate"][key], &want["aggregate"][key], key);
    }
    for (g, w) in got["aggregate"]["per_class_iou"]
        .as_array()
        .unwrap()
        .iter()
        .zip(want["aggregate"]["per_class_iou"].as_array().unwrap())
    {
        assert_close(g, w, "per-class IoU");
    }
}

#[test]
fn ground_truth_against_itself_scores_one() {
    let gt = fixture("parsing_gt.json");
    let got = json(&eval_parsing(&gt, &gt));
    for key in ["miou", "ap_p_50", "ap_p_vol", "pcp_50"] {
        assert_eq!(got["aggregate"][key].as_f64(), Some(1.0), "{key}");
    }
}

#[test]
fn images_without_predictions_score_zero_ap() {
    let got = json(&eval_parsing(&fixture("parsing_pred.json"), &fixture("parsing_gt.json")));
    let empty = got["images"].as_array().unwrap().iter().find(|i| i["id"] == "empty").unwrap();
    assert_eq!(empty["ap_p_50"].as_f64(), Some(0.0));
    assert_eq!(empty["ap_p_vol"].as_f64(), Some(0.0));
}

#[test]
fn eval_densepose_matches_goldens() {
    for case in ["perfect", "wrong", "mixed"] {
        let got = eval_densepose(&format!("densepose_pred_{case}.json"));
        let want = read_json(&fixture(&format!("densepose_golden_{case}.json")));
        assert_close(&got["kappa"], &want["kappa"], "kappa");
        for (g, w) in got["images"].as_array().unwrap().iter().zip(want["images"].as_array().unwrap()) {
            assert_eq!(g["id"], w["id"]);
            for key in ["ap", "ap50", "ap75"] {
                assert_close(&g[key], &w[key], &format!("{case} {} {key}", w["id"]));
            }
        }
        for key in ["ap", "ap50", "ap75"] {
            assert_close(&got["aggregate"][key], &want["aggregate"][key], &format!("{case} {key}"));
        }
    }
    let perfect = eval_densepose("densepose_pred_perfect.json");
    assert_eq!(perfect["aggregate"]["ap"].as_f64(), Some(1.0));
}

#[test]
fn unknown_gradcheck_target_is_a_usage_error() {
    let o = prcnn(&["gradcheck", "bogus"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("bogus") && o.stderr.contains("known:"), "{}", o.stderr);
    assert!(o.stdout.is_empty());
}

#[test]
fn gradcheck_lists_targets() {
    let o = prcnn(&["gradcheck", "--list"]);
    assert_eq!(o.code, 0);
    assert_eq!(o.stdout.lines().count(), prcnn_core::gradcheck::targets::names().len());
}

#[test]
fn gradcheck_single_target_passes_and_tiny_tolerance_fails() {
    let name = prcnn_core::gradcheck::targets::names()[0].clone();
    let ok = json(&prcnn(&["gradcheck", &name]));
    assert_eq!(ok["passed"], true);
    assert_eq!(ok["targets"][0]["target"], name.as_str());
    let strict = prcnn(&["gradcheck", &name, "--tolerance", "1e-300"]);
    assert_eq!(strict.code, 1);
    let report: Value = serde_json::from_str(&strict.stdout).unwrap();
    assert_eq!(report["passed"], false);
    assert!(strict.stderr.contains("FAIL"));
}

#[test]
fn mismatched_image_sets_are_rejected() {
    let o = eval_parsing(&fixture("parsing_pred.json"), &fixture("densepose_gt.json"));
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("street") && o.stderr.contains("p0"), "{}", o.stderr);
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let o = prcnn(&["eval-parsing", "--gt", fixture("parsing_gt.json").to_str().unwrap()]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("--pred"), "{}", o.stderr);
}

#[test]
fn bad_flags_exit_two_and_help_exits_zero() {
    assert_eq!(prcnn(&["frobnicate"]).code, 2);
    assert_eq!(prcnn(&["params", "--threads", "0"]).code, 2);
    let help = prcnn(&["--help"]);
    assert_eq!(help.code, 0);
    assert!(help.stdout.contains("eval-parsing"));
}

#[test]
fn scale_cdf_of_full_image_instance() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.json");
    std::fs::write(
        &gt,
        r#"{"image": {"width": 100, "height": 50}, "instances": [{"box": [0, 0, 100, 50]}]}"#,
    )
    .unwrap();
    let got = json(&prcnn(&["scale-cdf", "--gt", gt.to_str().unwrap(), "--grid", "0.5,1.0"]));
    assert_eq!(got["instances"], 1);
    let rows: Vec<(f64, f64)> = got["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["scale"].as_f64().unwrap(), r["fraction"].as_f64().unwrap()))
        .collect();
    assert_eq!(rows, vec![(0.5, 0.0), (1.0, 1.0)]);

    let bad = prcnn(&["scale-cdf", "--gt", gt.to_str().unwrap(), "--grid", "0.5,0.5"]);
    assert_eq!(bad.code, 2);
}

#[test]
fn bench_records_one_sample_per_repeat() {
    let got = json(&prcnn(&[
        "bench",
        "--variant",
        "gce_conv4",
        "--roi-resolution",
        "14",
        "--roi-resolution",
        "32",
        "--repeats",
        "3",
        "--warmup",
        "0",
    ]));
    let results = got["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    for r in results {
        assert_eq!(r["samples_ms"].as_array().unwrap().len(), 3);
    }
    let ratios = got["ratios"].as_array().unwrap();
    assert_eq!(ratios.len(), 1);
    assert!(ratios[0]["ratio"].as_f64().unwrap() > 0.0);
}

#[test]
fn params_reports_gce_lighter() {
    let got = json(&prcnn(&["params"]));
    assert_eq!(got["comparison"]["verdict"], "lighter");
    assert_eq!(got["comparison"]["baseline_body"], 17_698_816);
    assert_eq!(got["variants"].as_array().unwrap().len(), prcnn_core::branch::Variant::ALL.len());
}

#[test]
fn config_supplies_paths_and_out_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let body = serde_json::json!({
        "seed": 7,
        "out": "report.json",
        "pred": fixture("parsing_pred.json"),
        "gt": fixture("parsing_gt.json"),
        "num_classes": 4,
        "pcp_mode": "per_instance_mean",
    });
    std::fs::write(&cfg, body.to_string()).unwrap();
    let o = prcnn(&["eval-parsing", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.is_empty());
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["seed"], 7);
    assert_eq!(report["pcp_mode"], "per_instance_mean");

    // Flags beat config values.
    let o = prcnn(&["eval-parsing", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", dir.path().join("b.json").to_str().unwrap()]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(read_json(&dir.path().join("b.json"))["seed"], 9);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"roi_resolution": 14, "colour": "blue"}"#).unwrap();
    let o = prcnn(&["params", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("colour"), "{}", o.stderr);
}

#[test]
fn malformed_annotation_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.json");
    std::fs::write(&gt, r#"{"image": {"width": 10, "height": 10}, "instances": [{"box": [5, 5, 2, 2]}]}"#).unwrap();
    let o = prcnn(&["scale-cdf", "--gt", gt.to_str().unwrap(), "--grid", "1"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.starts_with("error:"), "{}", o.stderr);
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let args = |t: &'static str| {
        let pred = fixture("parsing_pred.json");
        let gt = fixture("parsing_gt.json");
        prcnn(&["--threads", t, "eval-parsing", "--pred", pred.to_str().unwrap(), "--gt", gt.to_str().unwrap(), "--num-classes", "4"])
    };
    let one = args("1");
    assert_eq!(one.code, 0);
    assert_eq!(one.stdout, args("3").stdout);
}
