//! Experiment directory layout, file protection and model snapshots.
//!
//! ```text
//! <root>/model.stan
//! <root>/datasets/<name>/{train.csv, dataset.md, protected/{test.csv, oracle.json}}
//! <root>/results/<name>/{log.jsonl, report.md, snapshots/<hash>.stan}
//! ```
//!
//! Protected files get mode 000. The harness lifts that to 0400 only for the
//! duration of a read ([`read_protected`]).

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::backend::content_hash;
use crate::datagen::{self, canonical_name, DatagenError, EmittedPaths, GeneratedDataset};

pub const MODEL_FILE: &str = "model.stan";
pub const LOG_FILE: &str = "log.jsonl";
pub const REPORT_FILE: &str = "report.md";
pub const SNAPSHOT_DIR: &str = "snapshots";
/// Uid and gid used for the unprivileged read probe when running as root.
pub const NOBODY: u32 = 65534;

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("no snapshot with hash {0}")]
    UnknownSnapshot(String),
    #[error("snapshot {hash} is corrupt (content hashes to {actual})")]
    CorruptSnapshot { hash: String, actual: String },
    #[error(transparent)]
    Datagen(#[from] DatagenError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> WorkspaceError {
    WorkspaceError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Whether file modes actually keep the proposer out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Enforcement {
    Enforced,
    Advisory,
}

/// Paths of one dataset's experiment inside a workspace root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkspaceLayout {
    pub root: PathBuf,
    pub dataset: String,
}

impl WorkspaceLayout {
    pub fn new(root: impl Into<PathBuf>, dataset: &str) -> Self {
        Self { root: root.into(), dataset: canonical_name(dataset) }
    }

    pub fn model_path(&self) -> PathBuf {
        self.root.join(MODEL_FILE)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("datasets").join(&self.dataset)
    }

    pub fn dataset_files(&self) -> EmittedPaths {
        EmittedPaths::new(&self.dataset_dir())
    }

    pub fn results_dir(&self) -> PathBuf {
        self.root.join("results").join(&self.dataset)
    }

    pub fn log_path(&self) -> PathBuf {
        self.results_dir().join(LOG_FILE)
    }

    pub fn report_path(&self) -> PathBuf {
        self.results_dir().join(REPORT_FILE)
    }

    pub fn snapshots_dir(&self) -> PathBuf {
        self.results_dir().join(SNAPSHOT_DIR)
    }

    pub fn descriptor(&self) -> Result<String, WorkspaceError> {
        let p = self.dataset_files().descriptor;
        std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))
    }
}

/// Writes the dataset tree and results directories under `root` and
/// protects the hidden files. Running it again with the same dataset leaves
/// every file byte-identical.
pub fn init_workspace(ds: &GeneratedDataset, root: &Path) -> Result<(WorkspaceLayout, Enforcement), WorkspaceError> {
    let layout = WorkspaceLayout::new(root, ds.name());
    let files = layout.dataset_files();
    for p in files.protected_files() {
        if p.exists() {
            set_mode(p, 0o600)?;
        }
    }
    datagen::emit_dataset(ds, &layout.dataset_dir())?;
    let snaps = layout.snapshots_dir();
    std::fs::create_dir_all(&snaps).map_err(|e| io_err(&snaps, e))?;
    let mut enforcement = Enforcement::Enforced;
    for p in files.protected_files() {
        if protect(p)? == Enforcement::Advisory {
            enforcement = Enforcement::Advisory;
        }
    }
    Ok((layout, enforcement))
}

#[cfg(unix)]
fn set_mode(path: &Path, mode: u32) -> Result<(), WorkspaceError> {
    use std::os::unix::fs::PermissionsExt;
    std::fs::set_permissions(path, std::fs::Permissions::from_mode(mode)).map_err(|e| io_err(path, e))
}

#[cfg(not(unix))]
fn set_mode(_path: &Path, _mode: u32) -> Result<(), WorkspaceError> {
    Ok(())
}

#[cfg(unix)]
fn protect(path: &Path) -> Result<Enforcement, WorkspaceError> {
    set_mode(path, 0o000)?;
    Ok(Enforcement::Enforced)
}

#[cfg(not(unix))]
fn protect(path: &Path) -> Result<Enforcement, WorkspaceError> {
    log::warn!("{}: no POSIX file modes here; protection is advisory only", path.display());
    Ok(Enforcement::Advisory)
}

/// Loads the full dataset, test split and oracle included, lifting the
/// protection just for the read.
pub fn read_protected(layout: &WorkspaceLayout) -> Result<GeneratedDataset, WorkspaceError> {
    let files = layout.dataset_files();
    for p in files.protected_files() {
        set_mode(p, 0o400)?;
    }
    let loaded = datagen::load_dataset(&layout.dataset_dir());
    let mut restore = Ok(());
    for p in files.protected_files() {
        if let Err(e) = protect(p) {
            restore = Err(e);
        }
    }
    let ds = loaded?;
    restore?;
    Ok(ds)
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), WorkspaceError> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

fn snapshot_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("{hash}.stan"))
}

/// Stores `bytes` under their content hash in `dir`; storing the same bytes
/// twice keeps one copy.
pub fn store_snapshot(bytes: &[u8], dir: &Path) -> Result<String, WorkspaceError> {
    let hash = content_hash(bytes);
    let path = snapshot_path(dir, &hash);
    if !path.exists() {
        atomic_write(&path, bytes)?;
    }
    Ok(hash)
}

/// Snapshots the current contents of `model_file`.
pub fn snapshot(model_file: &Path, dir: &Path) -> Result<String, WorkspaceError> {
    let bytes = std::fs::read(model_file).map_err(|e| io_err(model_file, e))?;
    store_snapshot(&bytes, dir)
}

pub fn read_snapshot(hash: &str, dir: &Path) -> Result<Vec<u8>, WorkspaceError> {
    let path = snapshot_path(dir, hash);
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(WorkspaceError::UnknownSnapshot(hash.to_string()))
        }
        Err(e) => return Err(io_err(&path, e)),
    };
    let actual = content_hash(&bytes);
    if actual != hash {
        return Err(WorkspaceError::CorruptSnapshot { hash: hash.to_string(), actual });
    }
    Ok(bytes)
}

/// Rewrites `model_file` with the snapshot `hash`, byte for byte.
pub fn restore(hash: &str, dir: &Path, model_file: &Path) -> Result<(), WorkspaceError> {
    let bytes = read_snapshot(hash, dir)?;
    atomic_write(model_file, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtectionStatus {
    /// Mode 000 and an unprivileged read failed.
    Denied,
    /// The platform has no POSIX modes.
    AdvisoryOnly,
    /// Mode is not 000, or an unprivileged process could read the file.
    Tampered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProtectionEntry {
    pub path: PathBuf,
    pub mode: Option<u32>,
    pub status: ProtectionStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProtectionReport {
    pub entries: Vec<ProtectionEntry>,
}

impl ProtectionReport {
    pub fn all_denied(&self) -> bool {
        self.entries.iter().all(|e| e.status == ProtectionStatus::Denied)
    }

    pub fn tampered(&self) -> impl Iterator<Item = &ProtectionEntry> {
        self.entries.iter().filter(|e| e.status == ProtectionStatus::Tampered)
    }
}

impl std::fmt::Display for ProtectionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            let status = match e.status {
                ProtectionStatus::Denied => "denied",
                ProtectionStatus::AdvisoryOnly => "advisory-only",
                ProtectionStatus::Tampered => "TAMPERED",
            };
            let mode = e.mode.map_or_else(|| "-".to_string(), |m| format!("{m:03o}"));
            writeln!(f, "{status:<14} {mode} {} ({})", e.path.display(), e.detail)?;
        }
        Ok(())
    }
}

/// Tries to read `path` from a child process. When the harness runs as root
/// the child drops to uid/gid [`NOBODY`], since root ignores file modes.
#[cfg(unix)]
pub fn unprivileged_can_read(path: &Path) -> Result<bool, WorkspaceError> {
    use std::os::unix::process::CommandExt;
    let mut cmd = std::process::Command::new("cat");
    cmd.arg(path).stdout(std::process::Stdio::null()).stderr(std::process::Stdio::null());
    // SAFETY: geteuid has no preconditions.
    if unsafe { libc::geteuid() } == 0 {
        cmd.uid(NOBODY).gid(NOBODY);
    }
    let status = cmd.status().map_err(|e| io_err(path, format!("cannot start read probe: {e}")))?;
    Ok(status.success())
}

/// Checks every protected file of `layout`.
pub fn verify_protection(layout: &WorkspaceLayout) -> ProtectionReport {
    let files = layout.dataset_files();
    let entries = files.protected_files().iter().map(|p| check_file(p)).collect();
    ProtectionReport { entries }
}

#[cfg(unix)]
fn check_file(path: &Path) -> ProtectionEntry {
    use std::os::unix::fs::PermissionsExt;
    let entry = |mode, status, detail: String| ProtectionEntry { path: path.to_path_buf(), mode, status, detail };
    let mode = match std::fs::metadata(path) {
        Ok(m) => m.permissions().mode() & 0o777,
        Err(e) => return entry(None, ProtectionStatus::Tampered, format!("cannot stat: {e}")),
    };
    if mode != 0 {
        return entry(Some(mode), ProtectionStatus::Tampered, format!("mode is {mode:03o}, expected 000"));
    }
    match unprivileged_can_read(path) {
        Ok(false) => entry(Some(mode), ProtectionStatus::Denied, "unprivileged read refused".into()),
        Ok(true) => entry(Some(mode), ProtectionStatus::Tampered, "unprivileged read succeeded".into()),
        Err(e) => entry(Some(mode), ProtectionStatus::Tampered, e.to_string()),
    }
}

#[cfg(not(unix))]
fn check_file(path: &Path) -> ProtectionEntry {
    ProtectionEntry {
        path: path.to_path_buf(),
        mode: None,
        status: ProtectionStatus::AdvisoryOnly,
        detail: "no POSIX file modes on this platform".into(),
    }
}
