use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_edge-admission"));
    cmd.env("RUST_LOG", "error");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

/// Every file under `root`, sorted, with its bytes.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).unwrap();
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn csv_header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn solve_defaults_report_residual_and_structure() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = run(&["solve", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for needle in ["iterations", "residual", "V(0, 0)", "value monotone in load:", "threshold policy in load:"] {
        assert!(text.contains(needle), "missing {needle} in {text}");
    }
    let art = json(&out.join("dp_solution.json"));
    assert_eq!(art["schema_version"], 1);
    assert!(art["residual"].as_f64().unwrap() <= 1e-9);
    // The stored verdict agrees with the printed one.
    let threshold_ok = art["threshold_violations"].as_array().unwrap().is_empty();
    assert_eq!(threshold_ok, text.contains("threshold policy in load: PASS"));
    assert_eq!(threshold_ok, !art["thresholds"].is_null());
    assert!(out.join("manifest_solve.json").exists());
}

#[test]
fn solve_with_monotone_costs_emits_thresholds() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "mono.json",
        r#"{"costs": {"strict_monotone": true,
            "running": [0,0,0,0,0,0,1,1,1,1,1,1,1,1,1,1,1,1,10,10,10],
            "penalty": [1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1]}}"#,
    );
    let out = dir.path().join("out");
    let o = run(&["solve", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("value monotone in load: PASS"), "{text}");
    assert!(text.contains("threshold policy in load: PASS"), "{text}");
    assert!(text.contains("thresholds:"), "{text}");
    let art = json(&out.join("dp_solution.json"));
    assert_eq!(art["thresholds"]["tau"].as_array().unwrap().len(), 21);
}

#[test]
fn solve_tolerance_bounds_reported_residual() {
    let dir = TempDir::new().unwrap();
    for tol in ["1e-9", "1e-4"] {
        let cfg = write_config(&dir, "tol.json", &format!(r#"{{"dp": {{"tol": {tol}}}}}"#));
        let out = dir.path().join(format!("out{tol}"));
        let o = run(&["solve", "--config", path_str(&cfg), "--out", path_str(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let residual = json(&out.join("dp_solution.json"))["residual"].as_f64().unwrap();
        assert!(residual <= tol.parse::<f64>().unwrap(), "{tol}: {residual}");
    }
}

#[test]
fn malformed_cost_table_is_config_error_naming_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "bad.json", r#"{"costs": {"running": [0.0, 1.0, 2.0]}}"#);
    let o = run(&["solve", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("costs.running"), "{}", stderr(&o));
}

#[test]
fn unknown_key_reports_line() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "typo.json", "{\n  \"scenario\": {\n    \"kindd\": 2\n  }\n}\n");
    let o = run(&["solve", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("kindd") && err.contains("line 3"), "{err}");
}

#[test]
fn bad_flag_values_are_config_errors() {
    assert_eq!(run(&["--scenario", "7", "solve"]).status.code(), Some(2));
    let dir = TempDir::new().unwrap();
    let out = path_str(dir.path());
    let o = run(&["train", "--learner", "ppo", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["train", "--learner", "baseline", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learner.name"), "{}", stderr(&o));
}

#[test]
fn non_convergence_exits_with_numeric_code() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "short.json", r#"{"dp": {"max_iter": 3}}"#);
    let o = run(&["solve", "--config", path_str(&cfg), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("did not converge"), "{}", stderr(&o));
}

fn train_small(out: &Path, learner: &str) -> Output {
    run(&[
        "train",
        "--learner",
        learner,
        "--seed",
        "1",
        "--scenario",
        "1",
        "--horizon-scale",
        "0.01",
        "--out",
        path_str(out),
    ])
}

#[test]
fn train_rerun_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = train_small(&out, "salmut");
    assert!(o.status.success(), "{}", stderr(&o));
    let first = snapshot(&out);
    let names: Vec<String> = first.iter().map(|(p, _)| p.display().to_string()).collect();
    assert!(names.contains(&"train/salmut_seed1_log.csv".to_string()), "{names:?}");
    assert!(names.contains(&"train/salmut_seed1_policy.json".to_string()), "{names:?}");
    assert!(names.contains(&"manifest_train.json".to_string()), "{names:?}");
    assert!(train_small(&out, "salmut").status.success());
    assert_eq!(snapshot(&out), first);

    // A different directory changes only the manifest's echo of it.
    let other = dir.path().join("other");
    assert!(train_small(&other, "salmut").status.success());
    let second = snapshot(&other);
    for ((pa, a), (pb, b)) in first.iter().zip(&second) {
        assert_eq!(pa, pb);
        if !pa.to_string_lossy().starts_with("manifest") {
            assert_eq!(a, b, "{}", pa.display());
        }
    }
}

#[test]
fn manifest_lists_outputs_with_digests() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    assert!(train_small(&out, "qlearning").status.success());
    let m = json(&out.join("manifest_train.json"));
    assert_eq!(m["seeds"], serde_json::json!([1]));
    assert_eq!(m["config"]["scenario"]["horizon_scale"], 0.01);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 3);
    for entry in outputs {
        let path = out.join(entry["path"].as_str().unwrap());
        assert!(path.exists(), "{}", path.display());
    }
}

#[test]
fn qlearning_log_schema_matches_salmut() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(train_small(&a, "salmut").status.success());
    assert!(train_small(&b, "qlearning").status.success());
    let ha = csv_header(&a.join("train/salmut_seed1_log.csv"));
    let hb = csv_header(&b.join("train/qlearning_seed1_log.csv"));
    assert_eq!(ha, hb);
    assert!(ha.starts_with("step,policy_hash,lambda,n_users,eval_mean"), "{ha}");
}

fn change_steps(out: &Path, scale: &str) -> Vec<u64> {
    let o = run(&[
        "trajectory",
        "--scenario",
        "2",
        "--seed",
        "0",
        "--horizon-scale",
        scale,
        "--out",
        path_str(out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::read_to_string(out.join("trajectory/s2_seed0.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn horizon_scale_moves_every_change_point() {
    let dir = TempDir::new().unwrap();
    // One third and two thirds of the scaled horizon.
    assert_eq!(change_steps(&dir.path().join("full"), "1"), vec![0, 333_333, 666_667]);
    assert_eq!(change_steps(&dir.path().join("desk"), "0.2"), vec![0, 66_667, 133_333]);
}

#[test]
fn evaluate_missing_artifact_names_the_file() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nowhere/policy.json");
    let o = run(&["evaluate", "--policy", path_str(&missing), "--out", path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(path_str(&missing)), "{}", stderr(&o));
    let o = run(&["evaluate", "--check-structure", path_str(&missing)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn evaluate_artifacts_and_check_structure() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    assert!(run(&["solve", "--out", path_str(&out)]).status.success());
    assert!(train_small(&out, "salmut").status.success());
    let o = run(&[
        "evaluate",
        "--scenario",
        "1",
        "--seed",
        "1",
        "--horizon-scale",
        "0.01",
        "--out",
        path_str(&out),
        "--policy",
        path_str(&out.join("dp_policy.json")),
        "--policy",
        path_str(&out.join("train/salmut_seed1_policy.json")),
        "--log",
        path_str(&out.join("train/salmut_seed1_log.csv")),
        "--check-structure",
        path_str(&out.join("dp_solution.json")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("value monotone in load:") && text.contains("threshold policy in load:"), "{text}");
    let eval = fs::read_to_string(out.join("evaluate/evaluation.csv")).unwrap();
    assert_eq!(eval.lines().count(), 3);
    assert!(csv_header(&out.join("evaluate/behavioral.csv")).contains("overload_entries"));
    assert_eq!(csv_header(&out.join("evaluate/curve.csv")), "step,median,q1,q3");
    assert!(out.join("evaluate/scatter.csv").exists());
}

fn compare_small(out: &Path) -> Output {
    run(&[
        "compare",
        "--scenario",
        "1",
        "--horizon-scale",
        "0.05",
        "--config",
        path_str(&out.with_extension("json")),
        "--out",
        path_str(out),
    ])
}

#[test]
fn compare_writes_four_policies_with_dp_lowest() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cmp");
    fs::write(out.with_extension("json"), r#"{"seeds": [0, 1, 2]}"#).unwrap();
    let o = compare_small(&out);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("compare/summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next().unwrap(), "seed,dp,salmut,qlearning,baseline");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 3);
    let mean = |i: usize| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64;
    for other in 1..4 {
        assert!(mean(0) < mean(other), "dp {} vs column {other} {}", mean(0), mean(other));
    }
    let first = snapshot(&out);
    assert!(compare_small(&out).status.success());
    assert_eq!(snapshot(&out), first);
}
