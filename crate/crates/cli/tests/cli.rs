use std::path::Path;
use std::process::{Command, Output};

fn coxvi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coxvi")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, seed: &str) -> std::path::PathBuf {
    let out = dir.join(format!("sim{seed}"));
    let o = coxvi(&[
        "simulate",
        "--n-individuals",
        "150",
        "--hazard-scale",
        "1e-6",
        "--seed",
        seed,
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn simulate_writes_data_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "3");
    let csv = std::fs::read_to_string(sim.join("data.csv")).unwrap();
    assert!(csv.starts_with("id,start,stop,event,X1,X2,X3,X4,X5,X6\n"));
    let truth: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sim.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["theta_true"].as_array().unwrap().len(), 6);
    assert_eq!(truth["n_individuals"], 150);
    assert!(sim.join("manifest.json").exists());
    assert!(sim.join("resolved.toml").exists());
}

#[test]
fn fit_then_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "4");
    let fit = dir.path().join("fit");
    let o = coxvi(&[
        "fit",
        "--data",
        path(&sim.join("data.csv")),
        "--steps",
        "200",
        "--batch-size",
        "64",
        "--batch-mode",
        "obs",
        "--out",
        path(&fit),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(fit.join("trace.csv")).unwrap();
    assert!(trace.lines().count() > 1);

    let out = dir.path().join("summary");
    let o = coxvi(&["summarize", "--state", path(&fit.join("state.json")), "--level", "0.9", "--out", path(&out)]);
    assert!(o.status.success());
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "name,mean,sd,hpd_low,hpd_high,hr,hr_low,hr_high");
    assert_eq!(lines.len(), 7);
    for line in &lines[1..] {
        let f: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!(f[2] < f[0] && f[0] < f[3]);
        assert!((f[4] - f[0].exp()).abs() < 1e-9 * f[4]);
    }
}

#[test]
fn oracle_fit_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "5");
    let o = coxvi(&["oracle-fit", "--data", path(&sim.join("data.csv"))]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 7);
}

#[test]
fn seed_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "6");
    let b = simulate(dir.path(), "7");
    assert_ne!(
        std::fs::read(a.join("data.csv")).unwrap(),
        std::fs::read(b.join("data.csv")).unwrap()
    );
}

#[test]
fn validation_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = path(&d.join("out")).to_string();

    let missing = coxvi(&["fit", "--data", path(&d.join("nope.csv")), "--out", &out]);
    assert_eq!(missing.status.code(), Some(1));
    let stderr = String::from_utf8(missing.stderr).unwrap();
    assert!(stderr.starts_with("error: ") && stderr.lines().count() == 1);

    let bad = d.join("bad.csv");
    std::fs::write(&bad, "id,start,stop,event,X1\n1,5,3,1,0.2\n").unwrap();
    assert_eq!(coxvi(&["fit", "--data", path(&bad), "--out", &out]).status.code(), Some(1));

    let config = d.join("bad.toml");
    std::fs::write(&config, "bogus = 1\n").unwrap();
    assert_eq!(coxvi(&["simulate", "--config", path(&config), "--out", &out]).status.code(), Some(1));

    let sim = simulate(d, "8");
    let data = path(&sim.join("data.csv")).to_string();
    assert_eq!(coxvi(&["fit", "--data", &data, "--lr=-1", "--out", &out]).status.code(), Some(1));
    assert_eq!(coxvi(&["fit", "--data", &data, "--family", "diag", "--out", &out]).status.code(), Some(1));
    assert_eq!(coxvi(&[]).status.code(), Some(1));
}

#[test]
fn separated_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("sep.csv");
    std::fs::write(&data, "id,start,stop,event,X1\n1,0,3,1,1\n2,0,5,0,0\n3,0,4,1,1\n").unwrap();
    let o = coxvi(&["oracle-fit", "--data", path(&data)]);
    assert_eq!(o.status.code(), Some(2));
}
