use std::process::{Command, Output};

use convprior::spectral::dual_kernel;
use convprior::{Kernel, KernelPreset};

fn convprior(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convprior")).args(args).output().unwrap()
}

#[test]
fn dual_kernel_prints_library_csv() {
    let out = convprior(&["dual-kernel", "--kernel", "triangular", "--width", "5", "--n", "16"]);
    assert!(out.status.success());
    let expect = dual_kernel(&Kernel::from_preset(&KernelPreset::Triangular { width: 5 }, 16).unwrap())
        .unwrap()
        .to_csv();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), expect);
}

#[test]
fn json_output_parses() {
    let out = convprior(&["--format", "json", "dual-kernel", "--kernel", "gaussian", "--n", "8"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["sigma"].as_array().unwrap().len(), 8);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(convprior(&["--bogus", "dual-kernel"]).status.code(), Some(1));
    assert_eq!(convprior(&["denoise"]).status.code(), Some(1));
    assert_eq!(convprior(&["dual-kernel", "--width", "4", "--n", "16"]).status.code(), Some(1));
    assert_eq!(convprior(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"schema_version":1,"seed":0,"experiment":{"kind":"denoise","extra":1}}"#).unwrap();
    let out = convprior(&["denoise", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn divergence_exits_two() {
    let out = convprior(&["decoder", "--d", "2", "--k", "8", "--n", "32", "--eta", "100", "--iters", "50"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn out_directory_receives_experiment_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = convprior(&["report", "--n", "16", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    for name in ["config.json", "result.json", "per_seed.csv", "low_frequency_mass.csv"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
}

#[test]
fn different_seeds_change_random_output() {
    let a = convprior(&["--seed", "1", "decoder", "--d", "2", "--k", "8", "--n", "32", "--iters", "3"]);
    let b = convprior(&["--seed", "2", "decoder", "--d", "2", "--k", "8", "--n", "32", "--iters", "3"]);
    assert!(a.status.success() && b.status.success());
    assert_ne!(a.stdout, b.stdout);
}
