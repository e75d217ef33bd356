//! Driver for an external CmdStan installation.
//!
//! Compilation goes through CmdStan's own makefile, one build per model hash.
//! Sampling runs one process per chain and reads the per-chain CSV output.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use super::io::{read_chain_csv, write_data_file};
use super::{Backend, BackendError, FitResult, ModelSource, SamplerConfig, StanData};

/// Environment variable naming the CmdStan root.
pub const CMDSTAN_ENV: &str = "CMDSTAN";

/// A located CmdStan installation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmdStan {
    root: PathBuf,
}

impl CmdStan {
    /// Uses `root` if it looks like a CmdStan tree (has a `makefile`).
    pub fn at(root: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let root = root.into();
        if !root.join("makefile").is_file() {
            return Err(BackendError::Config(format!(
                "{} is not a CmdStan installation (no makefile)",
                root.display()
            )));
        }
        let root = root.canonicalize().map_err(|e| BackendError::io(&root, e))?;
        Ok(Self { root })
    }

    /// Configured root first, then `$CMDSTAN`.
    pub fn discover(configured: Option<&Path>) -> Result<Self, BackendError> {
        if let Some(root) = configured {
            return Self::at(root);
        }
        match std::env::var_os(CMDSTAN_ENV) {
            Some(root) if !root.is_empty() => Self::at(PathBuf::from(root)),
            _ => Err(BackendError::Config(format!(
                "CmdStan not found: set {CMDSTAN_ENV} or the cmdstan key in the config file"
            ))),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Builds `model` under `cache_dir/<hash>/`, reusing an existing executable.
    pub fn compile(&self, model: &ModelSource, cache_dir: &Path) -> Result<ModelExecutable, BackendError> {
        let lock = compile_lock(model.hash());
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());

        let dir = cache_dir.join(model.hash());
        std::fs::create_dir_all(&dir).map_err(|e| BackendError::io(&dir, e))?;
        let dir = dir.canonicalize().map_err(|e| BackendError::io(&dir, e))?;
        let exe = dir.join(if cfg!(windows) { "model.exe" } else { "model" });
        if exe.is_file() {
            return Ok(ModelExecutable { path: exe, model_hash: model.hash().to_string(), cache_hit: true });
        }
        let stan = dir.join("model.stan");
        std::fs::write(&stan, model.text()).map_err(|e| BackendError::io(&stan, e))?;

        log::info!("compiling {} with {}", model.hash(), self.root.display());
        let out = Command::new("make")
            .arg("-C")
            .arg(&self.root)
            .arg(&exe)
            .output()
            .map_err(|e| BackendError::Config(format!("cannot run make: {e}")))?;
        if !out.status.success() || !exe.is_file() {
            // a half-built target must not turn into a cache hit later
            let _ = std::fs::remove_file(&exe);
            return Err(BackendError::Compile { message: combined_output(&out) });
        }
        Ok(ModelExecutable { path: exe, model_hash: model.hash().to_string(), cache_hit: false })
    }
}

fn compile_lock(hash: &str) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<String, Arc<Mutex<()>>>>> = OnceLock::new();
    let mut map = LOCKS.get_or_init(Default::default).lock().unwrap_or_else(|p| p.into_inner());
    map.entry(hash.to_string()).or_default().clone()
}

fn combined_output(out: &Output) -> String {
    let mut s = String::from_utf8_lossy(&out.stderr).into_owned();
    let stdout = String::from_utf8_lossy(&out.stdout);
    if !stdout.trim().is_empty() {
        if !s.is_empty() && !s.ends_with('\n') {
            s.push('\n');
        }
        s.push_str(&stdout);
    }
    s
}

/// A compiled model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelExecutable {
    pub path: PathBuf,
    pub model_hash: String,
    /// True when the executable already existed.
    pub cache_hit: bool,
}

impl ModelExecutable {
    /// Runs `cfg.chains` sampler processes, at most `cfg.parallel_chains` at a
    /// time. Chain `k` gets seed `cfg.seed + k` and CmdStan id `k + 1`.
    pub fn sample(&self, data: &StanData, cfg: &SamplerConfig) -> Result<FitResult, BackendError> {
        cfg.validate()?;
        let start = Instant::now();
        let work = tempfile::Builder::new()
            .prefix("bayesloop-fit-")
            .tempdir()
            .map_err(|e| BackendError::io(&std::env::temp_dir(), e))?;
        let data_path = work.path().join("data.json");
        write_data_file(data, &data_path)?;

        let outputs: Vec<PathBuf> = (0..cfg.chains).map(|k| work.path().join(format!("chain-{}.csv", k + 1))).collect();
        let batch = cfg.parallel_chains.max(1);
        for first in (0..cfg.chains).step_by(batch) {
            let last = (first + batch).min(cfg.chains);
            let results: Vec<(usize, std::io::Result<Output>)> = std::thread::scope(|s| {
                let handles: Vec<_> = (first..last)
                    .map(|k| {
                        let cmd = self.chain_command(k, &data_path, &outputs[k], cfg);
                        s.spawn(move || (k, run(cmd)))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
            });
            for (k, res) in results {
                let out = res.map_err(|e| BackendError::Sampler {
                    chain: k,
                    status: "not started".into(),
                    output: e.to_string(),
                })?;
                if !out.status.success() {
                    return Err(BackendError::Sampler {
                        chain: k,
                        status: out.status.to_string(),
                        output: combined_output(&out),
                    });
                }
            }
        }

        let chains = outputs.iter().map(|p| read_chain_csv(p)).collect::<Result<Vec<_>, _>>()?;
        let expected = data.int("N_test").and_then(|n| usize::try_from(n).ok());
        FitResult::from_chain_csvs(chains, expected, start.elapsed(), "cmdstan")
    }

    fn chain_command(&self, k: usize, data: &Path, output: &Path, cfg: &SamplerConfig) -> Command {
        let mut cmd = Command::new(&self.path);
        cmd.arg("sample")
            .arg(format!("num_samples={}", cfg.sampling_draws))
            .arg(format!("num_warmup={}", cfg.warmup_draws))
            .arg(format!("id={}", k + 1))
            .arg("data")
            .arg(format!("file={}", data.display()))
            .arg("random")
            .arg(format!("seed={}", cfg.chain_seed(k)))
            .arg("output")
            .arg(format!("file={}", output.display()))
            .arg("refresh=0");
        cmd
    }
}

fn run(mut cmd: Command) -> std::io::Result<Output> {
    cmd.stdin(std::process::Stdio::null()).output()
}

/// [`Backend`] over a CmdStan installation with an on-disk compile cache.
#[derive(Debug, Clone)]
pub struct CmdStanBackend {
    cmdstan: CmdStan,
    cache_dir: PathBuf,
}

impl CmdStanBackend {
    pub fn new(cmdstan: CmdStan, cache_dir: impl Into<PathBuf>) -> Self {
        Self { cmdstan, cache_dir: cache_dir.into() }
    }

    pub fn cmdstan(&self) -> &CmdStan {
        &self.cmdstan
    }
}

impl Backend for CmdStanBackend {
    fn id(&self) -> &str {
        "cmdstan"
    }

    fn fit(&self, model: &ModelSource, data: &StanData, cfg: &SamplerConfig) -> Result<FitResult, BackendError> {
        let exe = self.cmdstan.compile(model, &self.cache_dir)?;
        exe.sample(data, cfg)
    }
}
