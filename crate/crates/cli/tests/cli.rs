use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qrange(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrange"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn traces(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv") && !p.ends_with("summary.csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn fig3_preset_then_render() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fig3");
    let run = qrange(&["run-preset", "--preset", "fig3", "--seed", "42", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));

    let files = traces(&out);
    assert_eq!(files.len(), 8);
    for f in &files {
        let text = fs::read_to_string(f).unwrap();
        assert_eq!(text.lines().count(), 5001, "{}", f.display());
        assert!(text.starts_with("step,loss,theta_min,theta_max,s,z,enc_a,enc_b,clamp_event\n"));
        let meta = fs::read_to_string(format!("{}.meta.json", f.display())).unwrap();
        assert!(meta.contains(r#""schema": "qrange-trace-v1""#));
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 9);

    let mut args: Vec<String> = vec!["render".into()];
    for f in &files {
        args.push("--in".into());
        args.push(f.display().to_string());
    }
    let svg_a = dir.path().join("a.svg");
    let svg_b = dir.path().join("b.svg");
    for svg in [&svg_a, &svg_b] {
        let mut a = args.clone();
        a.extend(["--out".into(), svg.display().to_string(), "--fields".into(), "theta_min,theta_max".into()]);
        let a: Vec<&str> = a.iter().map(String::as_str).collect();
        assert_eq!(code(&qrange(&a)), 0);
    }
    let a = fs::read(&svg_a).unwrap();
    assert_eq!(a, fs::read(&svg_b).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.matches("<polyline").count(), 16);
    assert!(text.contains("min-max lr=0.01 b=3 theta_max"));
}

#[test]
fn gradcheck_reports_max_rel_err() {
    let out = qrange(&["gradcheck", "--param", "min-max", "--trials", "1000", "--seed", "7"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("max rel err"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["run-custom", "--lr", "0.01", "--param", "min-max", "--seed", "1", "--out", d],
        vec!["run-preset", "--preset", "fig3", "--out", d],
        vec!["run-preset", "--preset", "fig3", "--seed", "1", "--out", d, "--bogus"],
        vec!["run-preset", "--preset", "nope", "--seed", "1", "--out", d],
        vec!["gradcheck", "--param", "nope", "--seed", "1"],
        vec!["run-custom", "--bits", "3", "--lr", "0.01", "--param", "min-max", "--policy", "naive", "--seed", "1", "--out", d],
        vec!["run-custom", "--bits", "40", "--lr", "0.01", "--param", "min-max", "--seed", "1", "--out", d],
        vec!["oracle", "--bits", "3"],
        vec!["net", "--param", "min-max", "--lr", "0.01"],
    ];
    for args in cases {
        assert_eq!(code(&qrange(&args)), 2, "{args:?}");
    }
}

#[test]
fn render_rejects_empty_fields() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let run = qrange(&[
        "run-custom", "--bits", "3", "--lr", "0.01", "--steps", "20", "--param", "beta-gamma", "--no-oracle",
        "--seed", "3", "--out", d,
    ]);
    assert_eq!(code(&run), 0);
    let csv = traces(dir.path()).pop().unwrap();
    let svg = dir.path().join("x.svg");
    let out = qrange(&["render", "--in", csv.to_str().unwrap(), "--out", svg.to_str().unwrap(), "--fields", ""]);
    assert_eq!(code(&out), 2);
    assert!(!svg.exists());
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("x.svg");
    let missing = dir.path().join("missing.csv");
    let out = qrange(&["render", "--in", missing.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn oracle_and_net_print_results() {
    let out = qrange(&["oracle", "--bits", "3", "--seed", "42"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("theta_min "));

    let dir = tempfile::tempdir().unwrap();
    let loss = dir.path().join("loss.csv");
    let out = qrange(&["net", "--param", "min-max-plus", "--lr", "0.001", "--seed", "2", "--steps", "50", "--out", loss.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&loss).unwrap().lines().count(), 51);
}
