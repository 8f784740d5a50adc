//! End-to-end tests of the `p2d2` binary: spawn the real executable on real
//! config files and check exit codes, output files, and printed summaries.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use p2d2::trace::{self, IterationTrace};

fn write_config(dir: &Path, name: &str, value: &serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn p2d2_cmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2d2"))
        .args(args)
        .output()
        .expect("failed to spawn the p2d2 binary")
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("binary was killed by a signal")
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).unwrap()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8(output.stderr.clone()).unwrap()
}

/// Pulls the number out of a `name = value` summary line.
fn summary_value(stdout: &str, name: &str) -> f64 {
    let prefix = format!("{name} = ");
    stdout
        .lines()
        .find_map(|line| line.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("no '{name}' line in:\n{stdout}"))
        .parse()
        .unwrap_or_else(|_| panic!("'{name}' line is not a number in:\n{stdout}"))
}

/// A small, well-conditioned quadratic instance that converges quickly.
fn base_config(dir: &Path) -> serde_json::Value {
    serde_json::json!({
        "seed": 11,
        "graph": { "type": "ring", "K": 5 },
        "data": {
            "type": "synthetic",
            "samples_per_agent": 20,
            "dimension": 8,
            "num_nonzero": 3,
            "noise_level": 0.0
        },
        "cost": { "kind": "quadratic", "lambda": 0.5 },
        "regularizer": { "type": "l1", "rho": 0.01 },
        "form": "agent",
        "steps": { "mode": "certified", "safety": 0.5 },
        "max_iters": 400,
        "tol": 0.0,
        "output": dir.join("trace.csv")
    })
}

#[test]
fn run_writes_a_reproducible_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = base_config(dir.path());
    config["final_w"] = serde_json::json!(dir.path().join("final.csv"));
    let config_path = write_config(dir.path(), "run.json", &config);
    let config_arg = config_path.to_str().unwrap();

    let first = p2d2_cmd(&["run", config_arg]);
    assert_eq!(exit_code(&first), 0, "stderr: {}", stderr_of(&first));

    let trace_path = dir.path().join("trace.csv");
    let text = std::fs::read_to_string(&trace_path).unwrap();
    let parsed = IterationTrace::from_csv_str(&text).unwrap();
    assert!(parsed.records.len() > 1, "trace has {} records", parsed.records.len());
    assert_eq!(parsed.to_csv_string(), text, "trace does not round-trip losslessly");

    let final_w =
        trace::matrix_from_csv_str(&std::fs::read_to_string(dir.path().join("final.csv")).unwrap())
            .unwrap();
    assert_eq!((final_w.nrows(), final_w.ncols()), (5, 8));

    let second = p2d2_cmd(&["run", config_arg]);
    assert_eq!(exit_code(&second), 0);
    let rerun = std::fs::read_to_string(&trace_path).unwrap();
    assert_eq!(rerun, text, "rerun with the same config is not byte-identical");
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn certified_run_summary_respects_the_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let config = base_config(dir.path());
    let config_path = write_config(dir.path(), "run.json", &config);

    let output = p2d2_cmd(&["run", config_path.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));
    let stdout = stdout_of(&output);
    let fitted = summary_value(&stdout, "fitted_gamma");
    let certified = summary_value(&stdout, "certified_gamma");
    assert!(fitted <= certified + 1e-6, "fitted rate {fitted} exceeds certified rate {certified}");
    assert!(certified < 1.0);
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();

    let mut bad_alpha = base_config(dir.path());
    bad_alpha["steps"] = serde_json::json!({ "mode": "manual", "mu": 0.1, "alpha": 1.5 });
    let path = write_config(dir.path(), "bad-alpha.json", &bad_alpha);
    let output = p2d2_cmd(&["run", path.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 2);
    assert!(stderr_of(&output).contains("steps.alpha"), "stderr: {}", stderr_of(&output));

    let mut unknown = base_config(dir.path());
    unknown["stepsize"] = serde_json::json!(0.1);
    let path = write_config(dir.path(), "unknown.json", &unknown);
    let output = p2d2_cmd(&["run", path.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 2);
    assert!(stderr_of(&output).contains("stepsize"), "stderr: {}", stderr_of(&output));

    let mut no_output = base_config(dir.path());
    no_output.as_object_mut().unwrap().remove("output");
    let path = write_config(dir.path(), "no-output.json", &no_output);
    let output = p2d2_cmd(&["run", path.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 2);
    assert!(stderr_of(&output).contains("output"), "stderr: {}", stderr_of(&output));

    let output = p2d2_cmd(&["run", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(exit_code(&output), 2);
}

#[test]
fn certify_prints_the_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let config = base_config(dir.path());
    let path = write_config(dir.path(), "certify.json", &config);

    let output = p2d2_cmd(&["certify", path.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));
    let stdout = stdout_of(&output);
    for name in [
        "sigma_max",
        "sigma_under",
        "delta",
        "nu",
        "mu",
        "alpha",
        "rho",
        "c",
        "nu_rho",
        "gamma1",
        "gamma2",
        "beta",
        "gamma",
    ] {
        assert!(
            stdout.lines().any(|line| line.starts_with(&format!("{name} = "))),
            "no '{name}' line in:\n{stdout}"
        );
    }
    let gamma = summary_value(&stdout, "gamma");
    assert!(gamma > 0.0 && gamma < 1.0);

    // The printed certificate must be re-derivable from the printed inputs:
    // feed (mu, alpha, rho, c) and the problem constants back through the
    // library and demand the same numbers.
    let constants = p2d2::model::CostConstants {
        delta: summary_value(&stdout, "delta"),
        nu: summary_value(&stdout, "nu"),
    };
    let spectrum = p2d2::topology::SpectralBounds {
        sigma_max: summary_value(&stdout, "sigma_max"),
        sigma_under: summary_value(&stdout, "sigma_under"),
    };
    let recomputed = p2d2::analysis::rate_certificate(
        summary_value(&stdout, "mu"),
        summary_value(&stdout, "alpha"),
        summary_value(&stdout, "rho"),
        summary_value(&stdout, "c"),
        constants,
        spectrum,
        false,
    )
    .unwrap();
    for (name, value) in recomputed.entries() {
        let printed = summary_value(&stdout, name);
        assert!(
            (printed - value).abs() <= 1e-12 * value.abs().max(1.0),
            "{name}: printed {printed}, recomputed {value}"
        );
    }
}

#[test]
fn certify_fails_without_strong_convexity() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = base_config(dir.path());
    config["cost"] = serde_json::json!({ "kind": "logistic", "lambda": 0.0 });
    let path = write_config(dir.path(), "flat.json", &config);

    let output = p2d2_cmd(&["certify", path.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 3, "stderr: {}", stderr_of(&output));
    assert!(stderr_of(&output).contains("strongly convex"), "stderr: {}", stderr_of(&output));
}

#[test]
fn compare_agrees_across_forms() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = base_config(dir.path());
    config["graph"] = serde_json::json!({ "type": "random", "K": 6, "p": 0.5 });
    config["max_iters"] = serde_json::json!(120);
    let path = write_config(dir.path(), "compare.json", &config);
    let config_arg = path.to_str().unwrap();

    let output = p2d2_cmd(&["compare", config_arg, "--forms", "agent,stacked,reference"]);
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));
    let divergence = summary_value(&stdout_of(&output), "max_divergence");
    assert!(divergence < 1e-10, "divergence {divergence}");

    let output = p2d2_cmd(&["compare", config_arg, "--forms", "agent"]);
    assert_eq!(exit_code(&output), 2);

    let output = p2d2_cmd(&["compare", config_arg, "--forms", "agent,extra"]);
    assert_eq!(exit_code(&output), 2);
    assert!(stderr_of(&output).contains("regularizer"), "stderr: {}", stderr_of(&output));
}

#[test]
fn compare_includes_extra_when_admissible() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = base_config(dir.path());
    config["regularizer"] = serde_json::json!({ "type": "zero" });
    config["steps"] = serde_json::json!({ "mode": "manual", "mu": 0.05, "alpha": 1.0 });
    config["max_iters"] = serde_json::json!(120);
    let path = write_config(dir.path(), "extra.json", &config);

    let output =
        p2d2_cmd(&["compare", path.to_str().unwrap(), "--forms", "agent,stacked,reference,extra"]);
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));
    let divergence = summary_value(&stdout_of(&output), "max_divergence");
    assert!(divergence < 1e-8, "divergence {divergence}");
}

#[test]
fn libsvm_data_flows_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("data.svm");
    let mut lines = String::new();
    for s in 0..40 {
        let label = if s % 2 == 0 { "+1" } else { "-1" };
        let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
        lines.push_str(&format!(
            "{label} 1:{} 2:{} 3:{}\n",
            sign + 0.01 * s as f64,
            0.5 * sign,
            0.1 * (s % 5) as f64
        ));
    }
    std::fs::write(&data_path, &lines).unwrap();

    let mut config = base_config(dir.path());
    config["graph"] = serde_json::json!({ "type": "path", "K": 4 });
    config["data"] = serde_json::json!({ "type": "libsvm", "path": data_path, "normalize": true });
    config["cost"] = serde_json::json!({ "kind": "logistic", "lambda": 0.2 });
    config["max_iters"] = serde_json::json!(100);
    let path = write_config(dir.path(), "libsvm.json", &config);

    let output = p2d2_cmd(&["run", path.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr_of(&output));
    let text = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(IterationTrace::from_csv_str(&text).unwrap().records.len(), 101);

    // A malformed line is a config-class failure and names the line.
    std::fs::write(&data_path, "+1 1:0.5\n+1 nonsense\n").unwrap();
    let output = p2d2_cmd(&["run", path.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 2, "stderr: {}", stderr_of(&output));
    assert!(stderr_of(&output).contains("line 2"), "stderr: {}", stderr_of(&output));
}
