use std::path::Path;
use std::process::{Command, Output};

fn gevsar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gevsar")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = gevsar(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const SIM: &[&str] = &["simulate", "--xi", "0.5", "--kappa2", "0.1", "--tau2", "0.01", "--r", "30", "--seed", "7"];

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &[SIM, &["--out", "a.bin"]].concat());
    ok(dir.path(), &[SIM, &["--out", "b.bin"]].concat());
    let a = std::fs::read(dir.path().join("a.bin")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.bin")).unwrap());
    assert_eq!(a.len(), 16 + 4 * 16 * 16 * 30 + 32);
    ok(dir.path(), &["simulate", "--xi", "0.5", "--kappa2", "0.1", "--tau2", "0.01", "--seed", "8", "--out", "c.bin"]);
    assert_ne!(a, std::fs::read(dir.path().join("c.bin")).unwrap());
}

#[test]
fn unknown_flag_is_a_usage_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = gevsar(dir.path(), &[SIM, &["--out", "a.bin", "--frobnicate"]].concat());
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "usage");
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.bin"), b"not a stack at all").unwrap();
    let out = gevsar(dir.path(), &["madogram", "--stack", "junk.bin", "--out", "m.csv"]);
    assert_eq!(out.status.code(), Some(3));
    let out = gevsar(dir.path(), &["madogram", "--stack", "missing.bin", "--out", "m.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let out = gevsar(dir.path(), &["simulate", "--xi", "1.5", "--kappa2", "0.1", "--tau2", "0.01", "--out", "x.bin"]);
    assert_eq!(out.status.code(), Some(2));
    // a buffered, nugget-bearing stack violates the no-nugget likelihood support
    ok(dir.path(), &[SIM, &["--out", "a.bin"]].concat());
    let out = gevsar(dir.path(), &["mle", "--stack", "a.bin"]);
    assert_eq!(out.status.code(), Some(4));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "numerical");
    assert!(!dir.path().join("m.csv").exists());
}

#[test]
fn help_is_available_per_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["simulate", "dataset", "train", "estimate", "mle", "uq-fit", "uq-coverage", "madogram", "qq", "tiles", "surface"] {
        let out = gevsar(dir.path(), &[sub, "--help"]);
        assert!(out.status.success(), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--seed"), "{sub}");
    }
}

#[test]
fn train_smoke_on_a_small_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["dataset", "--n", "100", "--r", "2", "--d", "8", "--seed", "1", "--out", "ds"]);
    ok(p, &["train", "--data", "ds", "--epochs", "2", "--batch-size", "10", "--seed", "3", "--out", "net"]);
    for f in ["weights.bin", "estimator.json", "history.csv"] {
        assert!(p.join("net").join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(p.join("net/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,train_mae,val_mae,lr\n"));

    ok(p, &["simulate", "--xi", "0.3", "--kappa2", "0.5", "--tau2", "0.01", "--r", "2", "--d", "8", "--out", "s.bin"]);
    let out = gevsar(p, &["estimate", "--model", "net", "--stack", "s.bin"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);

    ok(p, &["simulate", "--xi", "0.3", "--kappa2", "0.5", "--tau2", "0.01", "--r", "3", "--d", "8", "--out", "s3.bin"]);
    let out = gevsar(p, &["estimate", "--model", "net", "--stack", "s3.bin"]);
    assert_eq!(out.status.code(), Some(2));
}
