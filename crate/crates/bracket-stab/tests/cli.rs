//! End-to-end exercises of the command-line interface and its exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bracket-stab"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("bracket-stab-test-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn brackets_enumeration_listing() {
    let output = bin()
        .args(["brackets", "--m", "2", "--h", "2"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = stdout(&output);
    assert!(text.contains("total: 8 labels"));
    assert!(text.contains("+[f1,f2]  2  4"));
    assert!(text.contains("-f2  1  1"));
    // keeping zero labels re-adds the pruned diagonal assignments
    let output = bin()
        .args(["brackets", "--m", "2", "--h", "2", "--keep-zero"])
        .output()
        .unwrap();
    assert!(stdout(&output).contains("total: 12 labels"));
}

#[test]
fn infeasible_radius_pair_is_a_config_error() {
    let output = bin()
        .args(["simulate", "--config"])
        .arg(fixture("bad_pair.json"))
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(String::from_utf8_lossy(&output.stderr).contains("0 < r < R"));
}

#[test]
fn expression_errors_carry_byte_offsets() {
    let output = bin()
        .args(["simulate", "--config"])
        .arg(fixture("parse_error.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("field 1 component 3"), "stderr: {stderr}");
    assert!(stderr.contains("byte 6"), "stderr: {stderr}");
}

#[test]
fn vanishing_cost_multiplier_fails_the_cost_audit_only() {
    let out = temp_dir("clf");
    let output = bin()
        .args(["simulate", "--config"])
        .arg(fixture("clf_only.json"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    // the cost bound is not evaluable, so the audit fails...
    assert_eq!(
        output.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    // ...but the stabilization results are still produced
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["all_pass"], serde_json::Value::Bool(false));
    let pair = &summary["pairs"][0];
    assert_eq!(
        pair["integrability"]["integrable"],
        serde_json::Value::Bool(false)
    );
    assert_eq!(pair["dissipative"]["passed"], serde_json::Value::Bool(true));
    let runs = pair["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    for run in runs {
        assert_eq!(
            run["audit"]["overshoot"]["pass"],
            serde_json::Value::Bool(true)
        );
        assert_eq!(
            run["audit"]["attractiveness"]["pass"],
            serde_json::Value::Bool(true)
        );
        assert_eq!(
            run["audit"]["entrapment"]["pass"],
            serde_json::Value::Bool(true)
        );
        assert_eq!(run["audit"]["cost"]["kind"], "NotEvaluable");
    }
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn identical_seeds_give_identical_summaries() {
    let out_a = temp_dir("det-a");
    let out_b = temp_dir("det-b");
    for out in [&out_a, &out_b] {
        let output = bin()
            .args(["simulate", "--config"])
            .arg(fixture("mini.json"))
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert_eq!(
            output.status.code(),
            Some(0),
            "stderr: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    }
    let a = std::fs::read(out_a.join("summary.json")).unwrap();
    let b = std::fs::read(out_b.join("summary.json")).unwrap();
    assert_eq!(a, b, "summaries differ between identical runs");
    let a = std::fs::read(out_a.join("trace_0.csv")).unwrap();
    let b = std::fs::read(out_b.join("trace_0.csv")).unwrap();
    assert_eq!(a, b, "traces differ between identical runs");
    // a different seed changes the sampled artifacts
    let out_c = temp_dir("det-c");
    let output = bin()
        .args(["simulate", "--config"])
        .arg(fixture("mini.json"))
        .arg("--seed")
        .arg("999")
        .arg("--out")
        .arg(&out_c)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let c = std::fs::read(out_c.join("summary.json")).unwrap();
    assert_ne!(std::fs::read(out_a.join("summary.json")).unwrap(), c);
    for out in [out_a, out_b, out_c] {
        let _ = std::fs::remove_dir_all(out);
    }
}

#[test]
fn check_subcommand_reports_margins() {
    let output = bin()
        .args(["check", "--config"])
        .arg(fixture("mini.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let text = stdout(&output);
    assert!(text.contains("pass over 300 samples"), "stdout: {text}");
    assert!(text.contains("max violation"));
}

#[test]
fn schedule_subcommand_prints_step_sizes() {
    let output = bin()
        .args(["schedule", "--config"])
        .arg(fixture("mini.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let text = stdout(&output);
    assert!(text.contains("degree 1: delta ="), "stdout: {text}");
    assert!(text.contains("degree 2: delta ="));
    assert!(text.contains("T(R,r)"));
    assert!(text.contains("\"delta_decrease\""));
}

#[test]
fn asymptotic_subcommand_reports_orders() {
    let output = bin()
        .args(["asymptotic", "--config"])
        .arg(scenario("heisenberg_k2.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let text = stdout(&output);
    // the commutator flow closes exactly on this system
    for line in text
        .lines()
        .filter(|l| l.starts_with("+[f1,f2]") || l.starts_with("-[f2,f1]"))
    {
        assert!(line.contains("exact"), "line: {line}");
    }
    assert!(text.lines().count() >= 9);
}

#[test]
fn degree_one_scenario_passes_end_to_end() {
    // k = 1 exercises the degenerate branches: zero lower step bound, unit
    // cost factor, the unscaled cost-bound integrand, and no step-count bound
    let output = bin()
        .args(["simulate", "--config"])
        .arg(scenario("planar_k1.json"))
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let text = stdout(&output);
    assert!(text.contains("overall: **pass**"), "stdout: {text}");
    assert!(text.contains("J(R,r) = 1.0000e0"));
}

#[test]
fn bundled_scenario_passes_end_to_end() {
    let out = temp_dir("bundled");
    let output = bin()
        .args(["simulate", "--config"])
        .arg(scenario("heisenberg_k2.json"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(
        output.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let text = stdout(&output);
    assert!(text.contains("overall: **pass**"));
    for name in [
        "summary.json",
        "report.md",
        "schedule.json",
        "constants.json",
        "envelopes.csv",
        "trace_0.csv",
        "trace_4.csv",
    ] {
        assert!(out.join(name).exists(), "missing artifact {name}");
    }
    let _ = std::fs::remove_dir_all(&out);
}
