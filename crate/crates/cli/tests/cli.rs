//! End-to-end tests of the `rpf` binary: option precedence, exit codes,
//! empty inputs and byte-for-byte determinism.

use std::path::Path;
use std::process::{Command, Output};

use rpf_core::csvio::{sha256_hex, Table};
use rpf_core::network::CASE9_M;
use serde_json::Value;

fn rpf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpf"))
        .current_dir(dir)
        .env_remove("RPF_OUT_DIR")
        .env_remove("RPF_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = rpf(dir, args);
    assert!(
        out.status.success(),
        "rpf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn table(path: &Path) -> Table {
    Table::parse(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn print_config(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Value {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rpf"));
    cmd.current_dir(dir).env_remove("RPF_OUT_DIR").env_remove("RPF_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.args(args).arg("--print-config").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn flags_override_config_file_override_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 3, "out_dir": "from_file", "threads": 3, "n_test": 4, "gen": {"n_train": 5}}"#,
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let env = [("RPF_OUT_DIR", "from_env"), ("RPF_THREADS", "2")];

    let c = print_config(dir.path(), &["gen"], &env);
    assert_eq!(c["global"]["out_dir"], "from_env");
    assert_eq!(c["global"]["threads"], 2);
    assert_eq!(c["global"]["seed"], 7);
    assert_eq!(c["options"]["n_train"], Value::Null);

    let c = print_config(dir.path(), &["--config", cfg, "gen"], &env);
    assert_eq!(c["global"]["out_dir"], "from_file");
    assert_eq!(c["global"]["threads"], 3);
    assert_eq!(c["global"]["seed"], 3);
    assert_eq!(c["options"]["n_train"], 5);
    // a command key missing from its section falls back to the top level
    assert_eq!(c["options"]["n_test"], 4);

    let c = print_config(
        dir.path(),
        &["--config", cfg, "gen", "--seed", "9", "--out-dir", "from_flag", "--n-train", "6"],
        &env,
    );
    assert_eq!(c["global"]["out_dir"], "from_flag");
    assert_eq!(c["global"]["seed"], 9);
    assert_eq!(c["options"]["n_train"], 6);
    assert_eq!(c["global"]["threads"], 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(rpf(d, &["--help"]).status.code(), Some(0));
    for cmd in ["gen", "train", "eval", "pf", "qss", "opf", "export"] {
        let out = rpf(d, &[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{cmd} --help");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
    assert_eq!(rpf(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(rpf(d, &["gen", "--n-train", "many"]).status.code(), Some(1));
    assert_eq!(rpf(d, &["opf", "--oracle", "--decisions", "PM_gen7"]).status.code(), Some(1));
    assert_eq!(rpf(d, &["pf", "--oracle", "--slack", "gen42"]).status.code(), Some(1));
    assert_eq!(rpf(d, &["train", "--epochs", "0"]).status.code(), Some(1));

    let missing = d.join("no_such_case.m");
    let out = rpf(d, &["--network", missing.to_str().unwrap(), "gen"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_case.m"));

    std::fs::write(d.join("bad.json"), "[1, 2]").unwrap();
    assert_eq!(rpf(d, &["--config", "bad.json", "gen"]).status.code(), Some(1));

    // runtime failure: nothing to train on
    ok(d, &["gen", "--n-train", "0", "--n-test", "0"]);
    let out = rpf(d, &["train", "--epochs", "5"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn model_from_another_network_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n-train", "40", "--n-test", "5"]);
    ok(d, &["train", "--features", "linear"]);
    // same case with one reactance changed
    let modified = CASE9_M.replacen("0.0576", "0.0600", 1);
    assert_ne!(modified, CASE9_M);
    std::fs::write(d.join("other.m"), modified).unwrap();
    let out = rpf(d, &["--network", "other.m", "eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

#[test]
fn empty_datasets_give_valid_files_and_empty_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n-train", "0", "--n-test", "0"]);
    for f in ["train.csv", "train_infeasible.csv", "test_feasible.csv", "test_infeasible.csv"] {
        let t = table(&d.join(f));
        assert!(t.rows.is_empty());
        assert_eq!(t.columns.len(), 12 + 18 + 2);
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("gen_report.json")).unwrap()).unwrap();
    assert_eq!(report["splits"].as_array().unwrap().len(), 4);

    ok(d, &["gen", "--n-train", "40", "--n-test", "0"]);
    ok(d, &["train", "--epochs", "5", "--hidden", "8,8"]);
    ok(d, &["eval"]);
    for f in ["summary.csv", "errors_voltage.csv", "errors_residuals.csv", "infeasible_comparison.csv"] {
        assert!(table(&d.join(f)).rows.is_empty(), "{f}");
    }
    ok(d, &["pf", "--oracle", "--n", "0"]);
    assert!(table(&d.join("pf_results.csv")).rows.is_empty());
}

fn hash(path: &Path) -> String {
    sha256_hex(&std::fs::read(path).unwrap())
}

#[test]
fn reruns_are_byte_identical_and_thread_count_does_not_matter() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let steps: [&[&str]; 5] = [
        &["gen", "--n-train", "60", "--n-test", "20"],
        &["train", "--epochs", "20", "--hidden", "10,10", "--with-infeasible"],
        &["eval"],
        &["pf", "--n", "10"],
        &["qss", "--n", "10"],
    ];
    for (dir, threads) in [(a.path(), "1"), (b.path(), "4")] {
        for step in steps {
            let mut args = vec!["--seed", "11", "--threads", threads];
            args.extend_from_slice(step);
            ok(dir, &args);
        }
    }
    for f in [
        "train.csv",
        "train_infeasible.csv",
        "test_feasible.csv",
        "test_infeasible.csv",
        "model.json",
        "model_curve.csv",
        "summary.csv",
        "errors_voltage.csv",
        "errors_residuals.csv",
        "pf_results.csv",
        "qss_results.csv",
    ] {
        assert_eq!(hash(&a.path().join(f)), hash(&b.path().join(f)), "{f}");
    }
    // a different seed gives different data
    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["--seed", "12", "gen", "--n-train", "60", "--n-test", "20"]);
    assert_ne!(hash(&a.path().join("train.csv")), hash(&c.path().join("train.csv")));
}

#[test]
fn bim_models_report_structural_zeros_and_are_refused_by_operation_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n-train", "80", "--n-test", "10"]);
    ok(d, &["train", "--formulation", "bim", "--epochs", "10", "--hidden", "10,10", "--output", "bim.json"]);
    ok(d, &["eval", "--model", "bim.json"]);
    let t = table(&d.join("summary.csv"));
    let col = |name: &str| t.column(name).unwrap();
    let feasible = t.rows.iter().find(|r| r[col("test_set")] == "feasible").unwrap();
    assert_eq!(feasible[col("formulation")], "bim");
    // Im-KCL is zero at the slack and both PV buses: 3 of 9
    let im: f64 = feasible[col("zero_share_im_kcl")].parse().unwrap();
    assert!((im - 1.0 / 3.0).abs() < 1e-12, "{im}");
    assert_eq!(feasible[col("zero_share_kvl")], "1");
    assert_eq!(rpf(d, &["pf", "--model", "bim.json", "--n", "2"]).status.code(), Some(1));
}

#[test]
fn operation_tasks_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["qss", "--oracle", "--feasible", "--n", "5", "--r", "0.05"]);
    let t = table(&d.join("qss_results.csv"));
    assert_eq!(t.rows.len(), 5);
    assert_eq!(t.header["droop"]["r"], 0.05);
    ok(d, &["opf", "--oracle", "--grid", "4", "--v-bounds", "0.9,1.2", "--svg"]);
    assert_eq!(table(&d.join("opf_grid.csv")).rows.len(), 16);
    let svg = std::fs::read_to_string(d.join("opf_grid.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    ok(d, &["export", "--n", "50"]);
    let s: Value = serde_json::from_str(&std::fs::read_to_string(d.join("structure.json")).unwrap()).unwrap();
    assert_eq!((s["n_voltage_vars"].as_u64(), s["n_residuals"].as_u64()), (Some(18), Some(19)));
    let summary = table(&d.join("angles_summary.csv"));
    assert_eq!(summary.rows.len(), 2);
}
