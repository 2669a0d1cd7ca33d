use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SCHEMA_BASE: &str = "https://hedgeval.invalid/schemas/";

fn hedgeval(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hedgeval"))
        .current_dir(dir)
        .env_remove("HEDGEVAL_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hedgeval(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

fn validate(schema: &str, instance: &Value) {
    let mut builder = jsonschema::Registry::new();
    for name in [
        "rle",
        "annotations",
        "results",
        "semantic_mask",
        "report.v1",
    ] {
        let file = format!("{name}.schema.json");
        let contents = read_json(schema_dir().join(&file));
        builder = builder
            .add(
                format!("{SCHEMA_BASE}{file}"),
                jsonschema::Resource::from_contents(contents),
            )
            .unwrap();
    }
    let registry = builder.prepare().unwrap();
    let validator = jsonschema::options()
        .with_registry(&registry)
        .with_base_uri(format!("{SCHEMA_BASE}{schema}"))
        .build(&read_json(schema_dir().join(schema)))
        .unwrap();
    let errors: Vec<String> = validator
        .iter_errors(instance)
        .map(|e| format!("{e} at {}", e.instance_path()))
        .collect();
    assert!(errors.is_empty(), "{schema}: {errors:#?}");
}

/// Synth dataset with 5 images and hedged detections (2 copies per object).
fn fixture() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        tmp.path(),
        &[
            "synth",
            "--out",
            "syn",
            "--images",
            "5",
            "--parts",
            "4",
            "--seed",
            "3",
            "--detections",
            "hedged.json",
            "--hedge-copies",
            "2",
        ],
    );
    ok(
        tmp.path(),
        &[
            "synth",
            "--out",
            "syn",
            "--images",
            "5",
            "--parts",
            "4",
            "--seed",
            "3",
            "--detections",
            "perfect.json",
        ],
    );
    tmp
}

#[test]
fn missing_ground_truth_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hedgeval(
        tmp.path(),
        &["eval", "--gt", "nope.json", "--dt", "nope.json"],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "{err}");
    assert!(err.contains("nope.json"), "{err}");
}

#[test]
fn zero_threads_rejected() {
    let tmp = fixture();
    let out = hedgeval(
        tmp.path(),
        &[
            "--threads",
            "0",
            "eval",
            "--gt",
            "syn/annotations.json",
            "--dt",
            "perfect.json",
        ],
    );
    assert!(!out.status.success());
}

#[test]
fn synth_outputs_match_schemas() {
    let tmp = fixture();
    let dir = tmp.path();
    validate(
        "annotations.schema.json",
        &read_json(dir.join("syn/annotations.json")),
    );
    validate("results.schema.json", &read_json(dir.join("hedged.json")));
    let sem = dir.join("syn/semantic/1/1.json");
    validate("semantic_mask.schema.json", &read_json(sem));
    let config = read_json(dir.join("syn/config.json"));
    assert_eq!(config["seed"], 3);
}

#[test]
fn perfect_detections_score_perfectly() {
    let tmp = fixture();
    let table = ok(
        tmp.path(),
        &[
            "eval",
            "--gt",
            "syn/annotations.json",
            "--dt",
            "perfect.json",
            "--out",
            "r.json",
            "--no-timestamp",
        ],
    );
    assert!(table.contains("mAP"), "{table}");
    let r = read_json(tmp.path().join("r.json"));
    validate("report.v1.schema.json", &r);
    assert!(r.get("generated_at").is_none());
    assert_eq!(r["aggregate"]["map"]["map"], 1.0);
    assert_eq!(r["aggregate"]["dc"]["dc"], 0.0);
    assert_eq!(r["aggregate"]["ne"]["ne"], 0.0);
    assert_eq!(r["aggregate"]["f1"]["f1"], 1.0);
    assert_eq!(r["counts"]["n_gt"], r["counts"]["n_det"]);
}

#[test]
fn hedged_report_with_verify_and_semantic_nms() {
    let tmp = fixture();
    let dir = tmp.path();
    let table = ok(
        dir,
        &[
            "eval",
            "--gt",
            "syn/annotations.json",
            "--dt",
            "hedged.json",
            "--out",
            "h.json",
            "--verify",
        ],
    );
    assert!(table.contains("verify: ok"), "{table}");
    let h = read_json(dir.join("h.json"));
    validate("report.v1.schema.json", &h);
    assert_eq!(h["aggregate"]["map"]["map"], 1.0);
    assert!(h["aggregate"]["dc"]["dc"].as_f64().unwrap() > 0.0);
    assert!(h["verify"]["mismatches"].as_array().unwrap().is_empty());

    ok(
        dir,
        &[
            "eval",
            "--gt",
            "syn/annotations.json",
            "--dt",
            "hedged.json",
            "--out",
            "s.json",
            "--semantic",
            "derive-from-gt",
        ],
    );
    let s = read_json(dir.join("s.json"));
    validate("report.v1.schema.json", &s);
    assert_eq!(s["nms"]["method"], "semantic");
    assert_eq!(s["aggregate"]["dc"]["dc"], 0.0);
    assert_eq!(s["aggregate"]["f1"]["f1"], 1.0);
}

#[test]
fn metric_selection_limits_report() {
    let tmp = fixture();
    ok(
        tmp.path(),
        &[
            "eval",
            "--gt",
            "syn/annotations.json",
            "--dt",
            "hedged.json",
            "--out",
            "r.json",
            "--metrics",
            "dc,ne",
        ],
    );
    let r = read_json(tmp.path().join("r.json"));
    let keys: Vec<&String> = r["aggregate"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["dc", "ne"]);
    let out = hedgeval(
        tmp.path(),
        &[
            "eval",
            "--gt",
            "syn/annotations.json",
            "--dt",
            "hedged.json",
            "--metrics",
            "bogus",
        ],
    );
    assert!(!out.status.success());
}

#[test]
fn nms_command_writes_results() {
    let tmp = fixture();
    let dir = tmp.path();
    ok(
        dir,
        &[
            "nms",
            "--gt",
            "syn/annotations.json",
            "--dt",
            "hedged.json",
            "--out",
            "kept.json",
            "--method",
            "mask",
        ],
    );
    let kept = read_json(dir.join("kept.json"));
    validate("results.schema.json", &kept);
    let perfect = read_json(dir.join("perfect.json"));
    assert_eq!(
        kept.as_array().unwrap().len(),
        perfect.as_array().unwrap().len()
    );

    ok(
        dir,
        &[
            "nms",
            "--gt",
            "syn/annotations.json",
            "--dt",
            "hedged.json",
            "--out",
            "sem.json",
            "--method",
            "semantic",
            "--semantic",
            "derive-from-gt",
        ],
    );
    assert_eq!(
        read_json(dir.join("sem.json")).as_array().unwrap().len(),
        perfect.as_array().unwrap().len()
    );
}

#[test]
fn prcurve_csv() {
    let tmp = fixture();
    let csv = ok(
        tmp.path(),
        &[
            "prcurve",
            "--gt",
            "syn/annotations.json",
            "--dt",
            "hedged.json",
        ],
    );
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("rank,confidence,is_tp,precision,recall"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 60);
    assert_eq!(rows.last().unwrap()[4].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn prcurve_needs_category_when_ambiguous() {
    let tmp = tempfile::tempdir().unwrap();
    let mask = serde_json::json!({"size": [4, 4], "counts": [0, 4, 12]});
    let gt = serde_json::json!({
        "images": [{"id": 1, "height": 4, "width": 4}],
        "categories": [{"id": 1, "name": "a"}, {"id": 2, "name": "b"}],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 1, "segmentation": mask},
            {"id": 2, "image_id": 1, "category_id": 2, "segmentation": mask}
        ]
    });
    let dt =
        serde_json::json!([{"image_id": 1, "category_id": 2, "score": 0.9, "segmentation": mask}]);
    std::fs::write(tmp.path().join("gt.json"), gt.to_string()).unwrap();
    std::fs::write(tmp.path().join("dt.json"), dt.to_string()).unwrap();
    let out = hedgeval(
        tmp.path(),
        &["prcurve", "--gt", "gt.json", "--dt", "dt.json"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--category"));
    let csv = ok(
        tmp.path(),
        &[
            "prcurve",
            "--gt",
            "gt.json",
            "--dt",
            "dt.json",
            "--category",
            "2",
        ],
    );
    assert_eq!(csv.lines().nth(1), Some("1,0.9,1,1,1"));
}

#[test]
fn thread_count_from_environment() {
    let tmp = fixture();
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_hedgeval"))
            .current_dir(tmp.path())
            .env("HEDGEVAL_THREADS", threads)
            .args([
                "eval",
                "--gt",
                "syn/annotations.json",
                "--dt",
                "hedged.json",
                "--no-timestamp",
                "--out",
            ])
            .arg(format!("t{threads}.json"))
            .output()
            .unwrap();
        assert!(out.status.success());
        std::fs::read(tmp.path().join(format!("t{threads}.json"))).unwrap()
    };
    assert_eq!(run("1"), run("3"));
}

#[test]
fn bench_nms_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = ok(
        tmp.path(),
        &["bench-nms", "--sizes", "20,40", "--runs", "1"],
    );
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n,method,seconds");
    assert_eq!(lines.len(), 5);
}

#[test]
fn synth_geometry_ranges() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        tmp.path(),
        &[
            "synth",
            "--out",
            "s",
            "--images",
            "2",
            "--length",
            "40,70",
            "--thickness",
            "6,10",
        ],
    );
    let cfg = read_json(tmp.path().join("s/config.json"));
    assert_eq!(cfg["length"], serde_json::json!([40.0, 70.0]));
    assert_eq!(cfg["thickness"], serde_json::json!([6.0, 10.0]));
    let out = hedgeval(tmp.path(), &["synth", "--out", "t", "--length", "40"]);
    assert!(!out.status.success());
}
