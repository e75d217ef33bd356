#![cfg(unix)]

use std::os::unix::fs::PermissionsExt;
use std::time::Duration;

use bayesloop::datagen::{generate, DatasetSpec};
use bayesloop::proposer::{external_next, ExternalProposer, ProposerContext};
use bayesloop::workspace::{init_workspace, read_protected, verify_protection, ProtectionStatus, NOBODY};

fn open_root() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::set_permissions(dir.path(), std::fs::Permissions::from_mode(0o755)).unwrap();
    dir
}

fn is_root() -> bool {
    // SAFETY: geteuid has no preconditions.
    unsafe { libc::geteuid() == 0 }
}

#[test]
fn proposer_process_cannot_read_protected_files() {
    let root = open_root();
    let ds = generate(&DatasetSpec::preset("regression_1d_small", 4).unwrap()).unwrap();
    let (layout, _) = init_workspace(&ds, root.path()).unwrap();

    let probe = r#"cat > /dev/null
for f in protected/test.csv protected/oracle.json train.csv; do
  if cat "$f" > /dev/null 2>&1; then r="$r $f:read"; else r="$r $f:denied"; fi
done
printf '{"model_text":"model { }","notes":"%s","rationale":"probe","stop":false}' "$r""#;
    let mut agent = ExternalProposer::new(vec!["sh".into(), "-c".into(), probe.into()], Duration::from_secs(20));
    agent.current_dir = Some(layout.dataset_dir());
    if is_root() {
        agent.run_as = Some((NOBODY, NOBODY));
    }
    let ctx = ProposerContext {
        dataset_md: layout.descriptor().unwrap(),
        history: Vec::new(),
        current_model: String::new(),
        last_summary: String::new(),
    };
    let notes = external_next(&agent, &ctx).unwrap().notes;
    assert!(notes.contains("protected/test.csv:denied"), "{notes}");
    assert!(notes.contains("protected/oracle.json:denied"), "{notes}");
    assert!(notes.contains("train.csv:read"), "{notes}");

    // the harness itself can still score
    assert_eq!(read_protected(&layout).unwrap().test, ds.test);
    let report = verify_protection(&layout);
    assert!(report.entries.iter().all(|e| e.status == ProtectionStatus::Denied), "{report}");
}

#[test]
fn descriptor_and_context_carry_no_test_data() {
    let root = open_root();
    let ds = generate(&DatasetSpec::preset("hierarchical_small", 4).unwrap()).unwrap();
    let (layout, _) = init_workspace(&ds, root.path()).unwrap();
    let md = layout.descriptor().unwrap();
    let test_csv = ds.test.to_csv();
    for line in test_csv.lines().skip(1).take(10) {
        assert!(!md.contains(line));
    }
    assert!(!md.contains("oracle"));
}
