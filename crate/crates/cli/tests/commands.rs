use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use mtau_core::metrics::SUMMARY_ROWS;
use mtau_core::pipeline::container::{read_scan, read_seg, scan_path, seg_path};

const TINY_CONFIG: &str = r#"
seed = 3

[model]
in_channels = 4
out_channels = 1
depth = 2
base_filters = 4

[train]
learning_rate = 1e-3
epochs = 2
batch_size = 4

[data]
n = 5

[data.phantom]
extents = [6, 16, 16]
brain_radii = [2.5, 7.0, 7.0]
enhancing_radius = [1.5, 2.0]
ncr_radius = [2.5, 3.0]
edema_radius = [4.0, 5.0]
z_scale = 0.5
max_center_offset = [0.3, 1.0, 1.0]
"#;

struct Workspace {
    root: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        fs::write(root.path().join("tiny.toml"), TINY_CONFIG).unwrap();
        Workspace { root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn run(&self, args: &[&str]) -> anyhow::Result<()> {
        let config = self.p("tiny.toml");
        let mut full = vec!["mtau", "--config", config.as_str()];
        full.extend_from_slice(args);
        mtau_cli::run_from(full)
    }

    fn exit_code(&self, args: &[&str]) -> i32 {
        let status = Command::new(env!("CARGO_BIN_EXE_mtau"))
            .arg("--config")
            .arg(self.path("tiny.toml"))
            .args(args)
            .env("RUST_LOG", "error")
            .status()
            .unwrap();
        status.code().unwrap()
    }

    /// Generates data and trains all three models.
    fn trained(&self) -> &Self {
        self.run(&["gen-data", "--out", &self.p("data")]).unwrap();
        self.run(&["train", "--data", &self.p("data"), "--region", "all", "--out", &self.p("models")]).unwrap();
        self
    }
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    fs::read(a).unwrap() == fs::read(b).unwrap()
}

#[test]
fn gen_data_writes_cohort_and_is_reproducible() {
    let ws = Workspace::new();
    ws.run(&["gen-data", "--n", "3", "--seed", "7", "--out", &ws.p("a")]).unwrap();
    ws.run(&["gen-data", "--n", "3", "--seed", "7", "--out", &ws.p("b")]).unwrap();
    let names = files(&ws.path("a"));
    assert_eq!(names.len(), 3 * 4 + 2, "{names:?}");
    assert!(names.contains(&"manifest.json".to_string()) && names.contains(&"run_config.json".to_string()));
    for name in names.iter().filter(|n| *n != "run_config.json") {
        assert!(same_bytes(&ws.path("a").join(name), &ws.path("b").join(name)), "{name}");
    }
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("a/run_config.json")).unwrap()).unwrap();
    assert_eq!(echoed["data"]["n"], 3);
    assert_eq!(echoed["seed"], 7);
    assert_eq!(echoed["data"]["phantom"]["extents"], serde_json::json!([6, 16, 16]));
}

#[test]
fn unwritable_output_exits_with_usage_code() {
    let ws = Workspace::new();
    fs::write(ws.path("blocker"), "file").unwrap();
    assert_eq!(ws.exit_code(&["gen-data", "--n", "1", "--out", &ws.p("blocker/sub")]), 2);
}

#[test]
fn bad_arguments_and_missing_data_exit_with_usage_code() {
    let ws = Workspace::new();
    assert_eq!(ws.exit_code(&["train", "--data", &ws.p("data"), "--region", "3"]), 2);
    assert_eq!(ws.exit_code(&["train", "--data", &ws.p("nowhere"), "--out", &ws.p("m")]), 2);
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let ws = Workspace::new();
    ws.run(&["gen-data", "--out", &ws.p("data")]).unwrap();
    let code = ws.exit_code(&[
        "train", "--data", &ws.p("data"), "--region", "4", "--learning-rate", "1e30", "--epochs", "2", "--out", &ws.p("m"),
    ]);
    assert_eq!(code, 3);
}

#[test]
fn single_region_training_touches_only_its_artifacts() {
    let ws = Workspace::new();
    ws.run(&["gen-data", "--out", &ws.p("data")]).unwrap();
    ws.run(&["train", "--data", &ws.p("data"), "--region", "4", "--out", &ws.p("m4")]).unwrap();
    assert_eq!(
        files(&ws.path("m4")),
        ["region_4.bin", "region_4.json", "region_4_history.csv", "run_config.json", "split.json"]
    );
    let history = fs::read_to_string(ws.path("m4/region_4_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn concurrent_training_matches_sequential_single_region_runs() {
    let ws = Workspace::new();
    ws.trained();
    for region in ["1", "2", "4"] {
        let out = ws.p(&format!("seq{region}"));
        ws.run(&["train", "--data", &ws.p("data"), "--region", region, "--threads", "1", "--out", &out]).unwrap();
        for ext in ["bin", "json"] {
            let name = format!("region_{region}.{ext}");
            assert!(same_bytes(&ws.path("models").join(&name), &Path::new(&out).join(&name)), "{name}");
        }
        let name = format!("region_{region}_history.csv");
        assert!(same_bytes(&ws.path("models").join(&name), &Path::new(&out).join(&name)));
    }
}

#[test]
fn sweep_infer_evaluate_contracts() {
    let ws = Workspace::new();
    ws.trained();
    let (data, models) = (ws.p("data"), ws.p("models"));
    ws.run(&["sweep-threshold", "--data", &data, "--models", &models, "--out", &ws.p("sweep")]).unwrap();
    let thresholds: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(ws.path("sweep/thresholds.json")).unwrap()).unwrap();
    assert_eq!(thresholds.keys().collect::<Vec<_>>(), ["1", "2", "4"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("sweep/threshold_report.json")).unwrap()).unwrap();
    for key in ["1", "2", "4"] {
        let r = &report[key];
        if !r["degenerate"].as_bool().unwrap() {
            let j = |p: &serde_json::Value| p["tpr"].as_f64().unwrap() - p["fpr"].as_f64().unwrap();
            assert!(j(&r["chosen"]) >= j(&r["at_default"]), "region {key}");
        }
        let roc = fs::read_to_string(ws.path(&format!("sweep/roc_{key}.csv"))).unwrap();
        assert_eq!(roc.lines().next().unwrap(), "threshold,tpr,fpr,youden,dice");
    }
    ws.run(&["sweep-threshold", "--data", &data, "--models", &models, "--out", &ws.p("sweep2")]).unwrap();
    assert!(same_bytes(&ws.path("sweep/thresholds.json"), &ws.path("sweep2/thresholds.json")));

    let th = ws.p("sweep/thresholds.json");
    let infer = |out: &str, extra: &[&str]| {
        let mut args = vec!["infer", "--data", &data, "--models", &models, "--thresholds", &th, "--out", out];
        args.extend_from_slice(extra);
        ws.run(&args).unwrap();
    };
    infer(&ws.p("pred"), &["--overlay"]);
    infer(&ws.p("pred2"), &["--cases", "case_0000,case_0001"]);
    for id in ["case_0000", "case_0001"] {
        let pred = read_seg(&seg_path(&ws.path("pred"), id)).unwrap();
        let scan = read_scan(&scan_path(&ws.path("data"), id)).unwrap();
        assert_eq!(pred.shape, scan.shape);
        assert!(pred.labels().iter().all(|l| [0, 1, 2, 4].contains(l)));
        for ext in ["vol.json", "vol.raw"] {
            let name = format!("{id}_seg.{ext}");
            assert!(same_bytes(&ws.path("pred").join(&name), &ws.path("pred2").join(&name)));
        }
        let overlays = files(&ws.path("pred/overlay").join(id));
        assert_eq!(overlays.len(), 6);
        let image = fs::read_to_string(ws.path("pred/overlay").join(id).join("slice_000.pgm")).unwrap();
        assert!(image.starts_with("P2\n16 16\n255\n"));
    }
    assert_eq!(files(&ws.path("pred2")).len(), 2 * 2 + 1);

    ws.run(&["evaluate", "--pred", &ws.p("pred"), "--truth", &data, "--out", &ws.p("report")]).unwrap();
    let summary = fs::read_to_string(ws.path("report/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect::<Vec<_>>(), SUMMARY_ROWS);
    assert!(rows.iter().all(|r| r.split(',').count() == 13));
    assert!(ws.path("report/cases.csv").exists() && ws.path("report/exclusions.csv").exists());
}

#[test]
fn evaluating_truth_against_itself_is_perfect() {
    let ws = Workspace::new();
    ws.run(&["gen-data", "--n", "3", "--out", &ws.p("data")]).unwrap();
    ws.run(&["evaluate", "--pred", &ws.p("data"), "--truth", &ws.p("data"), "--out", &ws.p("report")]).unwrap();
    let summary = fs::read_to_string(ws.path("report/summary.csv")).unwrap();
    let mut lines = summary.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let mean: Vec<&str> = lines.next().unwrap().split(',').collect();
    for (h, v) in header.iter().zip(&mean).skip(1) {
        let v: f64 = v.parse().unwrap();
        if h.starts_with("hausdorff") {
            assert_eq!(v, 0.0, "{h}");
        } else {
            assert_eq!(v, 1.0, "{h}");
        }
    }
}

#[test]
fn evaluate_lists_unmatched_cases() {
    let ws = Workspace::new();
    ws.run(&["gen-data", "--n", "2", "--out", &ws.p("data")]).unwrap();
    fs::create_dir_all(ws.path("pred")).unwrap();
    for ext in ["vol.json", "vol.raw"] {
        fs::copy(ws.path(&format!("data/case_0000_seg.{ext}")), ws.path(&format!("pred/case_0000_seg.{ext}"))).unwrap();
        fs::copy(ws.path(&format!("data/case_0000_seg.{ext}")), ws.path(&format!("pred/stray_seg.{ext}"))).unwrap();
    }
    let err = ws.run(&["evaluate", "--pred", &ws.p("pred"), "--truth", &ws.p("data"), "--out", &ws.p("r")]).unwrap_err();
    assert!(format!("{err:#}").contains("stray"), "{err:#}");
    assert_eq!(mtau_cli::exit_code(&err), 2);
}

#[test]
fn thresholds_missing_a_region_are_rejected() {
    let ws = Workspace::new();
    ws.trained();
    fs::write(ws.path("bad.json"), r#"{"1": 0.4, "2": 0.5}"#).unwrap();
    let code = ws.exit_code(&[
        "infer", "--data", &ws.p("data"), "--models", &ws.p("models"), "--thresholds", &ws.p("bad.json"), "--out", &ws.p("p"),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn flags_override_config_values() {
    let ws = Workspace::new();
    ws.run(&["gen-data", "--out", &ws.p("data")]).unwrap();
    ws.run(&["train", "--data", &ws.p("data"), "--region", "2", "--epochs", "1", "--out", &ws.p("m")]).unwrap();
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("m/run_config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["epochs"], 1);
    assert_eq!(echoed["train"]["batch_size"], 4);
    assert_eq!(echoed["model"]["depth"], 2);
    assert_eq!(echoed["args"]["train"]["region"], "2");
    assert_eq!(fs::read_to_string(ws.path("m/region_2_history.csv")).unwrap().lines().count(), 2);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let ws = Workspace::new();
    fs::write(ws.path("typo.toml"), "[train]\nepochz = 3\n").unwrap();
    let err = mtau_cli::run_from(["mtau", "--config", &ws.p("typo.toml"), "gen-data", "--out", &ws.p("d")]).unwrap_err();
    assert!(format!("{err:#}").contains("epochz"));
}
