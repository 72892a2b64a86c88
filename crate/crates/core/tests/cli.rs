use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ncm_stream::harness::RunMetrics;

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncm-stream")).args(args).current_dir(cwd).output().expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, out: &str) -> PathBuf {
    let o = bin(
        &["gen", "--classes", "20", "--dim", "8", "--per-class-train", "30", "--per-class-test", "10", "--seed", "7", "--out", out],
        dir,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    PathBuf::from(stdout(&o).trim())
}

fn metrics(path: &Path) -> RunMetrics {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_writes_manifest_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a");
    let b = gen(dir.path(), "b");
    assert!(a.ends_with("manifest.json"));
    let a_dir = dir.path().join("a");
    let b_dir = dir.path().join("b");
    for f in ["manifest.json", "synthetic.ocle"] {
        assert_eq!(fs::read(a_dir.join(f)).unwrap(), fs::read(b_dir.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::metadata(a_dir.join("synthetic.ocle")).unwrap().len(), 20 + 20 * 40 * (4 + 8 * 4));
    assert!(dir.path().join(&b).exists());
}

#[test]
fn gen_missing_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["gen", "--classes", "10", "--dim", "4", "--per-class-train", "5", "--per-class-test", "5"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--seed"));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn run_writes_metrics_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "data");
    fs::write(dir.path().join("run.json"), r#"{"manifest": "data/manifest.json", "method": "candidate_ncm", "step_size": 5}"#)
        .unwrap();
    let o = bin(&["run", "run.json", "--out", "results"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let results = dir.path().join("results");
    let m = metrics(&results.join("metrics.json"));
    assert_eq!(m.per_step.len(), 4);
    let csv = fs::read_to_string(results.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,accuracy");
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[4], format!("4,{}", m.last));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(results.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["exemplar_free"], true);
    assert_eq!(manifest["reads"]["single_pass"], true);
    assert_eq!(manifest["config"]["method"], "candidate_ncm");
}

#[test]
fn malformed_config_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{\n  \"method\": \"candidate_ncm\",\n  \"step_size\": 5,,\n}").unwrap();
    let o = bin(&["run", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3 column"), "{}", stderr(&o));
    assert!(!dir.path().join("results").exists());
}

#[test]
fn exemplar_free_method_rejects_budget() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), r#"{"method": "candidate_ncm", "exemplar_budget": 2000}"#).unwrap();
    let o = bin(&["run", "run.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("exemplar-free method cannot take a buffer"));
}

#[test]
fn missing_dataset_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), r#"{"manifest": "nowhere/manifest.json", "method": "full_ncm"}"#).unwrap();
    let o = bin(&["run", "run.json"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn sweep_over_step_sizes() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "data");
    let sweep = r#"{
        "base": {"manifest": "data/manifest.json", "method": "candidate_ncm"},
        "axis": {"step_size": [5, 10, 20]},
        "output_dir": "sweep"
    }"#;
    fs::write(dir.path().join("sweep.json"), sweep).unwrap();
    let o = bin(&["sweep", "sweep.json"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let out = dir.path().join("sweep");
    let mut points: Vec<PathBuf> =
        fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).filter(|p| p.join("metrics.json").exists()).collect();
    points.sort();
    assert_eq!(points.len(), 3);

    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("method,M,Q,avg,last"));
    for (line, (point, m)) in lines.zip(points.iter().zip([5, 10, 20])) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[..3], ["candidate_ncm", &m.to_string(), "0"]);
        let run = metrics(&point.join("metrics.json"));
        assert_eq!(fields[3].parse::<f64>().unwrap(), run.avg);
        assert_eq!(fields[4].parse::<f64>().unwrap(), run.last);
        assert_eq!(run.per_step.len(), 20 / m);
    }
}

#[test]
fn parallel_sweep_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "data");
    let sweep = r#"{
        "base": {"manifest": "data/manifest.json", "method": "er", "step_size": 5},
        "axis": {"exemplar_budget": [0, 20, 100]},
        "output_dir": "unused"
    }"#;
    fs::write(dir.path().join("sweep.json"), sweep).unwrap();
    assert_eq!(bin(&["sweep", "sweep.json", "--out", "seq"], dir.path()).status.code(), Some(0));
    assert_eq!(bin(&["sweep", "sweep.json", "--out", "par", "--parallel"], dir.path()).status.code(), Some(0));
    assert_eq!(
        fs::read(dir.path().join("seq/summary.csv")).unwrap(),
        fs::read(dir.path().join("par/summary.csv")).unwrap()
    );
    assert!(!dir.path().join("unused").exists());
}

#[test]
fn empty_sweep_axis_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("sweep.json"),
        r#"{"base": {"method": "full_ncm"}, "axis": {"method": []}, "output_dir": "out"}"#,
    )
    .unwrap();
    let o = bin(&["sweep", "sweep.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty"));
}

#[test]
fn sweep_rejects_invalid_points() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("sweep.json"),
        r#"{"base": {"method": "full_ncm"}, "axis": {"exemplar_budget": [0, 1000]}, "output_dir": "out"}"#,
    )
    .unwrap();
    let o = bin(&["sweep", "sweep.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sweep point 1"));
}

#[test]
fn export_check_accepts_good_and_rejects_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "data");
    let o = bin(&["export-check", "data/manifest.json"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("800 records"));
    let o = bin(&["export-check", "data/synthetic.ocle"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("20 distinct labels"));

    let mut bytes = fs::read(dir.path().join("data/synthetic.ocle")).unwrap();
    bytes.truncate(bytes.len() - 10);
    fs::write(dir.path().join("cut.ocle"), &bytes).unwrap();
    let o = bin(&["export-check", "cut.ocle"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("offset"), "{}", stderr(&o));
}
