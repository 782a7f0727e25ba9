mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::model_path;

fn agespace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agespace"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn trace_into(dir: &Path, model: &str) {
    let o = agespace(&["trace", "--model", &model_path(model), "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn verify(dir: &Path, model: &str) -> Output {
    agespace(&["verify", "--model", &model_path(model), "--out", dir.to_str().unwrap()])
}

#[test]
fn trace_writes_branch_profiles_and_model() {
    let tmp = tempfile::tempdir().unwrap();
    trace_into(tmp.path(), "logistic.toml");
    let mut r = csv::Reader::from_path(tmp.path().join("branch.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    assert_eq!(&headers[1], "n");
    let rows: Vec<_> = r.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 21);
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 1.0);
    for row in &rows {
        let identity: f64 = row[4].parse().unwrap();
        assert!(identity <= 1e-6);
    }
    let profiles = std::fs::read_dir(tmp.path().join("profiles")).unwrap().count();
    assert_eq!(profiles, 21);
    let model = std::fs::read_to_string(tmp.path().join("model.toml")).unwrap();
    assert!(agespace::parse_model(&model).is_ok());
}

#[test]
fn verify_accepts_fresh_trace() {
    let tmp = tempfile::tempdir().unwrap();
    trace_into(tmp.path(), "logistic.toml");
    let o = verify(tmp.path(), "logistic.toml");
    assert!(
        o.status.success(),
        "{}{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn verify_rejects_tampered_parameter() {
    let tmp = tempfile::tempdir().unwrap();
    trace_into(tmp.path(), "logistic.toml");
    let path = tmp.path().join("branch.csv");
    let mut r = csv::Reader::from_path(&path).unwrap();
    let headers = r.headers().unwrap().clone();
    let mut rows: Vec<csv::StringRecord> = r.records().map(|r| r.unwrap()).collect();
    let n: f64 = rows[5][1].parse().unwrap();
    let mut fields: Vec<String> = rows[5].iter().map(str::to_string).collect();
    fields[1] = format!("{:.16e}", n * 1.01);
    rows[5] = csv::StringRecord::from(fields);
    let mut w = csv::Writer::from_path(&path).unwrap();
    w.write_record(&headers).unwrap();
    for row in &rows {
        w.write_record(row).unwrap();
    }
    w.flush().unwrap();

    let o = verify(tmp.path(), "logistic.toml");
    assert_eq!(o.status.code(), Some(1));
    let text = format!("{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(text.contains("branch identity"), "{text}");
}

#[test]
fn missing_model_exits_with_two() {
    let o = agespace(&["trace", "--model", "/nonexistent/model.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_model_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(
        &path,
        "[domain]\na_max = 1\nnx = 3\nna = 4\n[coefficients]\nmu = \"1 +\"\nb = 1\n",
    )
    .unwrap();
    let o = agespace(&["normalize", "--model", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_needs_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let o = agespace(&[
        "verify",
        "--model",
        &model_path("logistic.toml"),
        "--out",
        tmp.path().to_str().unwrap(),
        "--format",
        "txt",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn normalizing_twice_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let once = tmp.path().join("once.toml");
    let twice = tmp.path().join("twice.toml");
    let o = agespace(&[
        "normalize",
        "--model",
        &model_path("crowding.toml"),
        "--out",
        once.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let o = agespace(&[
        "normalize",
        "--model",
        once.to_str().unwrap(),
        "--out",
        twice.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let line = stdout(&o)
        .lines()
        .find(|l| l.starts_with("r_before"))
        .unwrap()
        .to_string();
    let r: f64 = line.split('=').nth(1).unwrap().trim().parse().unwrap();
    assert!((r - 1.0).abs() <= 1e-10, "{line}");
}

#[test]
fn txt_trace_is_written() {
    let tmp = tempfile::tempdir().unwrap();
    let o = agespace(&[
        "trace",
        "--model",
        &model_path("logistic.toml"),
        "--out",
        tmp.path().to_str().unwrap(),
        "--format",
        "txt",
        "--max-points",
        "4",
    ]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(tmp.path().join("branch.txt")).unwrap();
    assert!(text.lines().count() >= 5);
}

#[test]
fn fixedpoint_reports_unit_radius() {
    let tmp = tempfile::tempdir().unwrap();
    let o = agespace(&[
        "fixedpoint",
        "--model",
        &model_path("shell.toml"),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("fixedpoint_B.csv").exists());
    assert!(tmp.path().join("shell_report.csv").exists());
}

#[test]
fn bad_flags_are_usage_errors() {
    let o = agespace(&["trace", "--model", &model_path("logistic.toml"), "--step", "-1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = agespace(&["explode"]);
    assert_eq!(o.status.code(), Some(2));
}
