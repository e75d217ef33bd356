use std::path::Path;
use std::process::{Command, Output};

fn bayesloop(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bayesloop"))
        .arg("--root")
        .arg(root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_data_writes_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = bayesloop(dir.path(), &["gen-data", "regression-1d-large", "--seed", "7"]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("500 training rows, 200 test rows"), "{}", stdout(&out));
    assert!(dir.path().join("datasets/regression_1d_large/train.csv").exists());

    let out = bayesloop(dir.path(), &["gen-data", "hierarchical-small"]);
    assert!(stdout(&out).contains("160 training rows, 40 test rows"), "{}", stdout(&out));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bayesloop(dir.path(), &["gen-data"]).status.code(), Some(2));
    assert_eq!(bayesloop(dir.path(), &["gen-data", "no-such-kind"]).status.code(), Some(2));
    assert_eq!(bayesloop(dir.path(), &["gen-data", "soccer"]).status.code(), Some(2));
    let out = bayesloop(dir.path(), &["evaluate", "--dataset", "regression-1d-small", "--rationale", "r"]);
    assert_eq!(out.status.code(), Some(2));
    let out = bayesloop(dir.path(), &["loop", "--proposer", "bogus", "--dataset", "regression-1d-small"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replayed_loop_halts_on_patience() {
    let dir = tempfile::tempdir().unwrap();
    let out = bayesloop(
        dir.path(),
        &["loop", "--proposer", "scripted:hier-small", "--backend", "replay", "--max-iterations", "20", "--patience", "3"],
    );
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("stopped after 4 records"), "{}", stdout(&out));
    let log = std::fs::read_to_string(dir.path().join("results/hierarchical_small/log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn report_is_rebuilt_from_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = bayesloop(dir.path(), &["loop", "--proposer", "scripted:regression-large", "--backend", "replay"]);
    assert!(out.status.success(), "{out:?}");
    let path = dir.path().join("results/regression_1d_large/report.md");
    std::fs::remove_file(&path).unwrap();
    let out = bayesloop(dir.path(), &["report", "--dataset", "regression-1d-large"]);
    assert!(out.status.success(), "{out:?}");
    let report = std::fs::read_to_string(&path).unwrap();
    let log = std::fs::read_to_string(dir.path().join("results/regression_1d_large/log.jsonl")).unwrap();
    let rows = report.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Iter")).count();
    assert_eq!(rows, log.lines().count());
}

#[test]
fn oracle_and_protection() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::set_permissions(dir.path(), std::os::unix::fs::PermissionsExt::from_mode(0o755)).unwrap();
    bayesloop(dir.path(), &["gen-data", "regression-1d-small"]);
    let out = bayesloop(dir.path(), &["oracle", "--dataset", "regression-1d-small"]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).starts_with("oracle NLPD: "));

    let out = bayesloop(dir.path(), &["verify-protection", "--dataset", "regression-1d-small"]);
    assert!(out.status.success(), "{out:?}");
    assert!(!stdout(&out).contains("tampered"));

    let test_csv = dir.path().join("datasets/regression_1d_small/protected/test.csv");
    std::fs::set_permissions(&test_csv, std::os::unix::fs::PermissionsExt::from_mode(0o644)).unwrap();
    let out = bayesloop(dir.path(), &["verify-protection", "--dataset", "regression-1d-small"]);
    assert_eq!(out.status.code(), Some(1), "{}", stdout(&out));
}

#[test]
fn missing_dataset_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bayesloop(dir.path(), &["oracle", "--dataset", "hierarchical-large"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}
