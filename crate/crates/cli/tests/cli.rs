//! End-to-end tests of the `symsde` binary: exit-code contract, report
//! reproducibility, seed override and thread-count invariance.

use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn symsde() -> Command {
    Command::new(env!("CARGO_BIN_EXE_symsde"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn verify_symmetry_passes_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(
        &cfg,
        r#"{
            "command": "verify-symmetry",
            "model": {"id": "bm2d"},
            "symmetry": {"family": "v_beta", "param": "z"},
            "tolerances": {"residual": 1e-9}
        }"#,
    );
    let out = symsde().arg("verify-symmetry").arg("--config").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[PASS]"), "{stdout}");
}

#[test]
fn failing_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    // An inline non-symmetry: Y = (x, 0, 0) with everything else zero.
    write(
        &cfg,
        r#"{
            "command": "verify-symmetry",
            "model": {"id": "bm2d"},
            "symmetry": {"inline": {
                "Y": ["x", "0", "0"],
                "m": "0",
                "C": [["0", "0"], ["0", "0"]],
                "tau": "0",
                "H": ["0", "0"]
            }},
            "tolerances": {"residual": 1e-9}
        }"#,
    );
    let out = symsde().arg("verify-symmetry").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL]"));
}

#[test]
fn parameter_error_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    // Degenerate diffusion: the 1/σ̃ terms of the symmetry family reject it.
    write(
        &cfg,
        r#"{
            "command": "ibp",
            "model": {"id": "lotka_volterra", "sigma_tilde": 0.0},
            "symmetry": {"family": "v_b", "param": "1"},
            "f": "tanh(x)*tanh(y)",
            "t": 0.5,
            "sim": {"n_paths": 100, "dt": 0.01, "horizon": 0.5, "seed": 1}
        }"#,
    );
    let out = symsde().arg("ibp").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn mismatched_command_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(&cfg, r#"{"command": "stein", "f": "x^2", "sim": {"n_paths": 10, "seed": 1}}"#);
    let out = symsde().arg("isserlis").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_rerun_is_bit_identical_and_thread_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let report1 = dir.path().join("report1.json");
    write(
        &cfg,
        &format!(
            r#"{{
                "command": "quasi-invariance",
                "model": {{"id": "bm2d"}},
                "symmetry": {{"family": "v_beta", "param": "z"}},
                "g": "tanh(x) + tanh(y)",
                "t": 0.5,
                "lambda": 0.3,
                "sim": {{"n_paths": 2000, "dt": 0.01, "horizon": 0.5, "seed": 9}},
                "output_path": "{}"
            }}"#,
            report1.display()
        ),
    );
    let out = symsde()
        .arg("quasi-invariance")
        .arg("--config")
        .arg(&cfg)
        .env("SYMSDE_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report1).unwrap()).unwrap();
    let estimate1 = report["checks"][0]["estimate"].as_f64().unwrap();

    // Re-run the echoed config (with a fresh output path) single-threaded.
    let mut echoed = report["config"].clone();
    let report2 = dir.path().join("report2.json");
    echoed["output_path"] = Value::String(report2.display().to_string());
    let cfg2 = dir.path().join("cfg2.json");
    write(&cfg2, &serde_json::to_string(&echoed).unwrap());
    let out = symsde()
        .arg("quasi-invariance")
        .arg("--config")
        .arg(&cfg2)
        .env("SYMSDE_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rerun: Value = serde_json::from_str(&std::fs::read_to_string(&report2).unwrap()).unwrap();
    let estimate2 = rerun["checks"][0]["estimate"].as_f64().unwrap();
    assert_eq!(
        estimate1.to_bits(),
        estimate2.to_bits(),
        "rerun of the echoed config must be bit-identical"
    );
    // Terms reproduce bit-exactly as well.
    assert_eq!(report["terms"], rerun["terms"]);
}

#[test]
fn seed_override_changes_the_echo_and_the_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let report = dir.path().join("report.json");
    write(
        &cfg,
        &format!(
            r#"{{
                "command": "stein",
                "f": "x^4",
                "t": 1.0,
                "sim": {{"n_paths": 5000, "seed": 42}},
                "output_path": "{}"
            }}"#,
            report.display()
        ),
    );
    let run = |seed: Option<u64>| -> (f64, u64) {
        let mut c = symsde();
        c.arg("stein").arg("--config").arg(&cfg);
        if let Some(s) = seed {
            c.arg("--seed-override").arg(s.to_string());
        }
        let out = c.output().unwrap();
        assert!(out.status.success());
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        (
            v["checks"][0]["estimate"].as_f64().unwrap(),
            v["config"]["sim"]["seed"].as_u64().unwrap(),
        )
    };
    let (e1, s1) = run(None);
    let (e2, s2) = run(Some(777));
    assert_eq!(s1, 42);
    assert_eq!(s2, 777);
    assert_ne!(e1.to_bits(), e2.to_bits());
}

#[test]
fn simulate_writes_a_dump_and_csv_has_terms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let dump = dir.path().join("paths.bin");
    let csv = dir.path().join("out.csv");
    write(
        &cfg,
        &format!(
            r#"{{
                "command": "simulate",
                "model": {{"id": "lotka_volterra"}},
                "sim": {{"n_paths": 64, "dt": 0.01, "horizon": 0.5, "seed": 3}},
                "dump_path": "{}"
            }}"#,
            dump.display()
        ),
    );
    let out = symsde()
        .arg("simulate")
        .arg("--config")
        .arg(&cfg)
        .arg("--csv")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dump.exists());
    // Header: 4×u64 + f64 + u64, then 64 paths × (51 states × 3 + 50 × 2 incr) + 64 weights.
    let expected = 48 + 8 * (64 * (51 * 3 + 50 * 2) + 64);
    assert_eq!(std::fs::metadata(&dump).unwrap().len(), expected as u64);
    assert!(csv.exists());
}
