use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use querykernel::output::read_trace;

fn qk(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_querykernel"))
        .args(args)
        .current_dir(cwd)
        .env_remove("QUERYKERNEL_API_TOKEN")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json_file(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn bo_run_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bo.toml",
        "mode = \"bo\"\nseed = 11\noutput_dir = \"results\"\n\n[objective]\nname = \"branin\"\n\n[bo]\nbudget = 10\ninit_count = 4\n",
    );
    let o = qk(&["run", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let trace = read_trace(&dir.path().join("results/trace.jsonl")).unwrap();
    assert_eq!(trace.len(), 14);
    for (k, s) in trace.iter().enumerate() {
        assert_eq!(s.iter, k);
        assert_eq!(s.point.len(), 2);
        assert_eq!(s.af.is_some(), k >= 4, "acquisition value only after the initial design");
    }
    let best = trace.iter().map(|s| s.value).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(trace.last().unwrap().incumbent, best);

    let summary = json_file(&dir.path().join("results/summary.json"));
    assert_eq!(summary["status"], "done");
    assert_eq!(summary["mode"], "bo");
    assert_eq!(summary["seed"], 11);
    assert_eq!(summary["best"]["value"].as_f64(), Some(best));
    assert_eq!(summary["best"]["point"].as_array().unwrap().len(), 2);
}

#[test]
fn json_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bo.json",
        r#"{"mode": "bo", "seed": 2, "objective": {"name": "sphere1d"}, "bo": {"budget": 4, "acquisition": "ucb"}}"#,
    );
    let o = qk(&["run", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = json_file(&dir.path().join("out/summary.json"));
    assert_eq!(summary["status"], "done");
    assert!(summary["steps"].as_u64().unwrap() >= 4);
}

#[test]
fn invalid_configs_exit_2_with_a_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown.toml", "mode = \"bo\"\n[objective]\nname = \"branin\"\n[bo]\nbudget = 5\nbugdet_extra = 1\n", "bugdet_extra", ":6:"),
        ("badmode.toml", "mode = \"gradient\"\n", "gradient", ":1:"),
        ("badval.toml", "mode = \"bo\"\n[objective]\nname = \"branin\"\n[bo]\nbudget = 5\nnoise_var = -1.0\n", "noise_var", ":6:"),
        ("syntax.toml", "mode = \"bo\"\n[bo\nbudget = 3\n", "", ":2:"),
        ("bad.json", "{\"mode\": \"bo\",\n \"seed\": \"x\"}\n", "", ":2:"),
    ];
    for (name, text, needle, line) in cases {
        let cfg = write(dir.path(), name, text);
        let o = qk(&["run", cfg.to_str().unwrap()], dir.path());
        let err = stderr(&o);
        assert_eq!(o.status.code(), Some(2), "{name}: {err}");
        assert!(err.contains(name) && err.contains(line) && err.contains(needle), "{name}: {err}");
        assert!(!dir.path().join("out").exists(), "{name} must not start a run");
    }
    let o = qk(&["run", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn audit_reports_gaps_and_rejects_bad_tables() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(
        dir.path(),
        "audit.csv",
        "prediction,label,group\n1,1,0\n0,1,0\n1,0,0\n0,0,0\n1,1,1\n1,1,1\n0,0,1\n1,0,1\n",
    );
    let o = qk(&["audit", csv.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((report["delta_sp"].as_f64().unwrap().abs() - 0.25).abs() < 1e-12, "{report}");
    assert!((report["delta_eo"].as_f64().unwrap().abs() - 0.5).abs() < 1e-12, "{report}");

    // group 1 has no actual positives: equal opportunity is undefined
    let undefined = write(dir.path(), "undef.csv", "pred,actual,group\n1,1,0\n0,0,0\n1,0,1\n0,0,1\n");
    let o = qk(&["audit", undefined.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("undefined") || stderr(&o).contains("no "), "{}", stderr(&o));

    let bad = write(dir.path(), "bad.csv", "pred,actual,group\n1,1,0\n1,2,1\n");
    let o = qk(&["audit", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":3"), "{}", stderr(&o));

    let headless = write(dir.path(), "headless.csv", "a,b,c\n1,1,0\n");
    assert_eq!(qk(&["audit", headless.to_str().unwrap()], dir.path()).status.code(), Some(2));
}

#[test]
fn audit_mode_run_writes_report_in_summary() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "t.csv", "pred,actual,group\n1,1,0\n0,1,0\n1,1,1\n1,0,1\n");
    let cfg = write(dir.path(), "audit.toml", "mode = \"audit\"\n[audit]\ncsv = \"t.csv\"\n");
    let o = qk(&["run", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = json_file(&dir.path().join("out/summary.json"));
    assert_eq!(summary["status"], "done");
    assert!(summary.to_string().contains("delta_eo"), "{summary}");
}

#[test]
fn bench_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let o = qk(&["bench", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope"));
    let o = qk(&["bench", "rf_approx", "--seeds", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for out in ["a", "b"] {
        let o = qk(&["bench", "rf_approx", "--seeds", "3", "--out", out], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("rf_approx: PASS"));
        let json = std::fs::read(dir.path().join(out).join("rf_approx.json")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join(out).join("rf_approx.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3 * 3, "header plus one row per seed and feature count");
        reports.push((json, csv));
    }
    assert_eq!(reports[0], reports[1]);
    let report: Value = serde_json::from_slice(&reports[0].0).unwrap();
    assert_eq!(report["name"], "rf_approx");
    assert_eq!(report["seeds"], serde_json::json!([0, 1, 2]));
    assert_eq!(report["pass"], true);
}
