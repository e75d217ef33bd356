//! Turning a model program plus data into posterior draws.
//!
//! Anything that yields a [`FitResult`] is a backend. The loop and the
//! scorers never look past that type, so the CmdStan driver and the
//! grid-approximation backend are interchangeable.

use std::path::Path;
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diagnostics::{ChainDraws, ChainTable, DiagnosticsError};
use crate::scoring::{self, LogLikMatrix, ScoringError};

pub mod cmdstan;
pub mod grid;
pub mod io;

pub use cmdstan::{CmdStan, CmdStanBackend, ModelExecutable};
pub use grid::{grid_fit, GridAxis, GridBackend, GridModel};
pub use io::{parse_chain_csv, read_chain_csv, write_data_file, ChainCsv, StanData, StanValue};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("model failed to compile:\n{message}")]
    Compile { message: String },
    #[error("sampler failed on chain {chain} ({status}):\n{output}")]
    Sampler { chain: usize, status: String, output: String },
    #[error("sampler output violates the model contract: {0}")]
    Contract(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("grid backend: {0}")]
    Grid(String),
    #[error("empty model text")]
    EmptyModel,
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

impl BackendError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        BackendError::Io { path: path.display().to_string(), message: e.to_string() }
    }
}

/// Hex SHA-256 of `bytes`; used for model and snapshot identity.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Candidate model program text with its content hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSource {
    text: String,
    hash: String,
}

impl ModelSource {
    pub fn new(text: impl Into<String>) -> Result<Self, BackendError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(BackendError::EmptyModel);
        }
        let hash = content_hash(text.as_bytes());
        Ok(Self { text, hash })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup_draws: usize,
    /// Post-warmup draws per chain.
    pub sampling_draws: usize,
    pub seed: u64,
    pub parallel_chains: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { chains: 4, warmup_draws: 1000, sampling_draws: 1000, seed: 1, parallel_chains: 4 }
    }
}

impl SamplerConfig {
    /// Draw count used for the large 1D regression, where Monte Carlo noise in
    /// the NLPD is otherwise comparable to the differences between models.
    pub const LARGE_REGRESSION_DRAWS: usize = 30_000;

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.chains == 0 || self.sampling_draws == 0 {
            return Err(BackendError::Config(format!(
                "need at least one chain and one draw (chains={}, draws={})",
                self.chains, self.sampling_draws
            )));
        }
        Ok(())
    }

    /// Seed for chain `index` (0-based).
    pub fn chain_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }
}

/// Posterior draws from one fit, with the `log_lik` matrix pulled out.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub draws: ChainDraws<f64>,
    /// Rows are chain-major: row `c * D + d` is draw `d` of chain `c`.
    pub loglik: LogLikMatrix<f64>,
    pub wall_time: Duration,
    pub backend_id: String,
}

impl FitResult {
    /// Assembles a fit from parsed per-chain sampler output, in chain order.
    ///
    /// Every chain must carry a `divergent__` column and `log_lik.1..N`
    /// columns; when `expected_points` is given, `N` must match it.
    pub fn from_chain_csvs(
        chains: Vec<ChainCsv>,
        expected_points: Option<usize>,
        wall_time: Duration,
        backend_id: &str,
    ) -> Result<Self, BackendError> {
        let first = chains.first().ok_or_else(|| BackendError::Contract("no chains".into()))?;
        let header = first.header.clone();
        let div_idx = first
            .column_index("divergent__")
            .ok_or_else(|| BackendError::Contract("missing column divergent__".into()))?;
        let ll_cols = scoring::loglik_columns(header.iter().map(String::as_str))
            .map_err(|e| BackendError::Contract(format!("missing column log_lik.*: {e}")))?;
        if let Some(n) = expected_points {
            if ll_cols.len() != n {
                return Err(BackendError::Contract(format!(
                    "log_lik has {} columns but the test set has {n} points",
                    ll_cols.len()
                )));
            }
        }
        let draws_per_chain = first.rows.len();
        let names: Vec<String> =
            header.iter().enumerate().filter(|(i, _)| *i != div_idx).map(|(_, h)| h.clone()).collect();

        let mut tables = Vec::with_capacity(chains.len());
        let mut loglik = Vec::with_capacity(chains.len() * draws_per_chain * ll_cols.len());
        for (c, chain) in chains.iter().enumerate() {
            if chain.header != header {
                return Err(BackendError::Contract(format!("chain {c} has a different header from chain 0")));
            }
            if chain.rows.len() != draws_per_chain {
                return Err(BackendError::Contract(format!(
                    "chain {c} has {} draws, chain 0 has {draws_per_chain}",
                    chain.rows.len()
                )));
            }
            let divergent = chain.rows.iter().map(|r| r[div_idx] != 0.0).collect();
            let columns = (0..header.len())
                .filter(|&i| i != div_idx)
                .map(|i| chain.rows.iter().map(|r| r[i]).collect())
                .collect();
            tables.push(ChainTable::from_columns(columns, divergent));
            for row in &chain.rows {
                loglik.extend(ll_cols.iter().map(|&i| row[i]));
            }
        }
        let draws = ChainDraws::new(names, tables)?;
        let loglik = LogLikMatrix::from_vec(chains.len() * draws_per_chain, ll_cols.len(), loglik)?;
        Ok(Self { draws, loglik, wall_time, backend_id: backend_id.to_string() })
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn fit(&self, model: &ModelSource, data: &StanData, cfg: &SamplerConfig) -> Result<FitResult, BackendError>;
}
