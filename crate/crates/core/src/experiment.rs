//! The accept/revert loop, its JSONL log and the markdown report.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, ModelSource, SamplerConfig, StanData};
use crate::diagnostics::{summarize, Health, HealthThresholds};
use crate::proposer::{Proposal, Proposer, ProposerContext, ProposerError};
use crate::scoring::nlpd;
use crate::trajectories::RecordedTrajectory;
use crate::workspace::{self, WorkspaceError, WorkspaceLayout};

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("NLPD is NaN (new={new}, best={best})")]
    NaN { new: f64, best: f64 },
    #[error("invalid loop config: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Log { path: String, line: usize, message: String },
    #[error("proposer failed at iteration {iteration}: {source}")]
    Proposer { iteration: usize, source: ProposerError },
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Total records, baseline included.
    pub max_iterations: usize,
    /// Consecutive non-improving iterations that end the run.
    pub patience: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self { max_iterations: 20, patience: 3 }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        if self.max_iterations == 0 || self.patience == 0 {
            return Err(LoopError::Config(format!(
                "max_iterations ({}) and patience ({}) must both be at least 1",
                self.max_iterations, self.patience
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Revert,
}

/// Strict improvement over the best so far. Ties and `+inf` revert.
pub fn decide(new: f64, best: f64) -> Result<Decision, LoopError> {
    if new.is_nan() || best.is_nan() {
        return Err(LoopError::NaN { new, best });
    }
    Ok(if new < best { Decision::Accept } else { Decision::Revert })
}

/// Number of records after which the loop stops, given the accept flags of
/// every record it would produce (index 0 is the baseline and always counts
/// as accepted).
pub fn halt_after(accepted: &[bool], cfg: &LoopConfig) -> usize {
    let mut misses = 0;
    for (i, &acc) in accepted.iter().enumerate() {
        let n = i + 1;
        if i > 0 {
            misses = if acc { 0 } else { misses + 1 };
        }
        if n >= cfg.max_iterations || misses >= cfg.patience {
            return n;
        }
    }
    accepted.len()
}

/// `+inf` is written as `null`, and `null` reads back as `+inf`.
mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    #[serde(with = "nonfinite")]
    pub max_rhat: f64,
    pub min_ess: f64,
    pub divergences: usize,
    pub health: Health,
}

impl DiagnosticsSummary {
    /// Placeholder for an iteration that produced no draws.
    pub fn unavailable() -> Self {
        Self { max_rhat: f64::INFINITY, min_ess: 0.0, divergences: 0, health: Health::Fail }
    }
}

impl From<&crate::DiagnosticsReport> for DiagnosticsSummary {
    fn from(r: &crate::DiagnosticsReport) -> Self {
        Self { max_rhat: r.max_rhat, min_ess: r.min_ess, divergences: r.divergences, health: r.health }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub timestamp: String,
    #[serde(with = "nonfinite")]
    pub nlpd: f64,
    pub accepted: bool,
    #[serde(with = "nonfinite")]
    pub best_so_far: f64,
    pub notes: String,
    pub rationale: String,
    pub model_hash: String,
    pub diagnostics: DiagnosticsSummary,
    pub wall_time_s: f64,
}

/// Append-only list of records backed by a JSONL file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentLog {
    path: PathBuf,
    records: Vec<IterationRecord>,
}

impl ExperimentLog {
    /// Reads `path` if it exists, otherwise starts empty.
    pub fn open(path: &Path) -> Result<Self, LoopError> {
        let log_err = |line: usize, message: String| LoopError::Log {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut records = Vec::new();
        match std::fs::File::open(path) {
            Ok(f) => {
                for (i, line) in BufReader::new(f).lines().enumerate() {
                    let line = line.map_err(|e| log_err(i + 1, e.to_string()))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let rec: IterationRecord =
                        serde_json::from_str(&line).map_err(|e| log_err(i + 1, e.to_string()))?;
                    if rec.iteration != records.len() {
                        return Err(log_err(
                            i + 1,
                            format!("iteration {} where {} was expected", rec.iteration, records.len()),
                        ));
                    }
                    records.push(rec);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(log_err(0, e.to_string())),
        }
        Ok(Self { path: path.to_path_buf(), records })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The accepted record with the lowest NLPD (earliest on ties).
    pub fn best(&self) -> Option<&IterationRecord> {
        self.records
            .iter()
            .filter(|r| r.accepted)
            .fold(None, |b: Option<&IterationRecord>, r| match b {
                Some(b) if b.nlpd <= r.nlpd => Some(b),
                _ => Some(r),
            })
    }

    /// Non-improving records since the last accepted one.
    pub fn trailing_rejections(&self) -> usize {
        self.records.iter().rev().take_while(|r| !r.accepted).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    /// Appends `record` and rewrites the file through a rename, so a crash
    /// leaves either the old or the new log.
    pub fn append(&mut self, record: IterationRecord) -> Result<(), LoopError> {
        if record.iteration != self.records.len() {
            return Err(LoopError::Log {
                path: self.path.display().to_string(),
                line: self.records.len() + 1,
                message: format!("appending iteration {} after {} records", record.iteration, self.records.len()),
            });
        }
        self.records.push(record);
        if let Err(e) = workspace::atomic_write(&self.path, self.to_jsonl().as_bytes()) {
            self.records.pop();
            return Err(e.into());
        }
        Ok(())
    }
}

/// Result of scoring one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub nlpd: f64,
    pub diagnostics: DiagnosticsSummary,
    pub wall_time_s: f64,
    /// Text shown to the proposer.
    pub summary: String,
}

pub trait Evaluator {
    fn evaluate(&mut self, model: &ModelSource, iteration: usize) -> Result<Evaluation, BackendError>;
}

pub fn format_summary(nlpd: f64, d: &DiagnosticsSummary) -> String {
    format!(
        "NLPD: {}\nmax R-hat: {:.3}  min ESS: {:.0}  divergences: {}  health: {}\n",
        format_nlpd(nlpd),
        d.max_rhat,
        d.min_ess,
        d.divergences,
        d.health
    )
}

/// Four decimals, as printed everywhere a human reads an NLPD.
pub fn format_nlpd(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "inf".to_string()
    }
}

/// Fits with a real backend and scores the `log_lik` output.
pub struct BackendEvaluator<'a> {
    pub backend: &'a dyn Backend,
    pub data: StanData,
    pub sampler: SamplerConfig,
    pub thresholds: HealthThresholds<f64>,
}

impl<'a> BackendEvaluator<'a> {
    pub fn new(backend: &'a dyn Backend, data: StanData, sampler: SamplerConfig) -> Self {
        Self { backend, data, sampler, thresholds: HealthThresholds::default() }
    }
}

impl Evaluator for BackendEvaluator<'_> {
    fn evaluate(&mut self, model: &ModelSource, _iteration: usize) -> Result<Evaluation, BackendError> {
        let fit = self.backend.fit(model, &self.data, &self.sampler)?;
        let score = nlpd(&fit.loglik);
        let diagnostics = match summarize(&fit.draws, &self.thresholds) {
            Ok(r) => DiagnosticsSummary::from(&r),
            Err(e) => {
                log::warn!("diagnostics unavailable: {e}");
                DiagnosticsSummary::unavailable()
            }
        };
        Ok(Evaluation {
            nlpd: score,
            summary: format_summary(score, &diagnostics),
            diagnostics,
            wall_time_s: fit.wall_time.as_secs_f64(),
        })
    }
}

/// Returns recorded NLPD values by iteration index instead of fitting.
pub struct ReplayEvaluator {
    values: Vec<f64>,
}

impl ReplayEvaluator {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn from_trajectory(t: &RecordedTrajectory) -> Self {
        Self::new(t.nlpds())
    }
}

impl Evaluator for ReplayEvaluator {
    fn evaluate(&mut self, _model: &ModelSource, iteration: usize) -> Result<Evaluation, BackendError> {
        let nlpd = *self
            .values
            .get(iteration)
            .ok_or_else(|| BackendError::Config(format!("no recorded value for iteration {iteration}")))?;
        let diagnostics = DiagnosticsSummary { max_rhat: 1.0, min_ess: 4000.0, divergences: 0, health: Health::Ok };
        Ok(Evaluation { nlpd, summary: format_summary(nlpd, &diagnostics), diagnostics, wall_time_s: 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxIterations,
    ProposerStop,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Patience => "patience exhausted",
            StopReason::MaxIterations => "iteration cap reached",
            StopReason::ProposerStop => "proposer asked to stop",
        })
    }
}

/// State of one experiment: the workspace, its log and the accepted model.
pub struct Experiment<'e> {
    pub layout: WorkspaceLayout,
    pub log: ExperimentLog,
    pub cfg: LoopConfig,
    evaluator: &'e mut dyn Evaluator,
    last_summary: String,
}

impl<'e> Experiment<'e> {
    /// Opens the experiment in `layout`, picking up any existing log.
    pub fn open(layout: WorkspaceLayout, cfg: LoopConfig, evaluator: &'e mut dyn Evaluator) -> Result<Self, LoopError> {
        cfg.validate()?;
        let log = ExperimentLog::open(&layout.log_path())?;
        Ok(Self { layout, log, cfg, evaluator, last_summary: String::new() })
    }

    pub fn best_so_far(&self) -> f64 {
        self.log.records().last().map_or(f64::INFINITY, |r| r.best_so_far)
    }

    pub fn last_summary(&self) -> &str {
        &self.last_summary
    }

    pub fn context(&self) -> Result<ProposerContext, LoopError> {
        let model_path = self.layout.model_path();
        let current_model = match std::fs::read_to_string(&model_path) {
            Ok(s) => s,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => {
                return Err(WorkspaceError::Io { path: model_path.display().to_string(), message: e.to_string() }.into())
            }
        };
        Ok(ProposerContext {
            dataset_md: self.layout.descriptor()?,
            history: self.log.records().to_vec(),
            current_model,
            last_summary: self.last_summary.clone(),
        })
    }

    /// Installs and scores `model`, keeps or reverts it, and logs the result.
    pub fn run_iteration(&mut self, model: &ModelSource, notes: &str, rationale: &str) -> Result<IterationRecord, LoopError> {
        self.iterate(model, notes, rationale, true)
    }

    /// Scores `model` and logs the result without touching the working model
    /// file. Used when an agent edits the model itself and decides on its own
    /// whether to keep the change; `accepted` still records whether the NLPD
    /// beat the best so far.
    pub fn record_evaluation(&mut self, model: &ModelSource, notes: &str, rationale: &str) -> Result<IterationRecord, LoopError> {
        self.iterate(model, notes, rationale, false)
    }

    fn iterate(&mut self, model: &ModelSource, notes: &str, rationale: &str, manage: bool) -> Result<IterationRecord, LoopError> {
        let iteration = self.log.len();
        let snaps = self.layout.snapshots_dir();
        let model_path = self.layout.model_path();
        let revert_to = self.log.best().map(|r| r.model_hash.clone());
        if let Some(h) = &revert_to {
            workspace::read_snapshot(h, &snaps)?;
        }
        let model_hash = workspace::store_snapshot(model.text().as_bytes(), &snaps)?;
        if manage {
            workspace::atomic_write(&model_path, model.text().as_bytes())?;
        }

        let started = Instant::now();
        let (eval, notes) = match self.evaluator.evaluate(model, iteration) {
            Ok(e) => (e, notes.to_string()),
            Err(e) => {
                let msg = e.to_string();
                let eval = Evaluation {
                    nlpd: f64::INFINITY,
                    diagnostics: DiagnosticsSummary::unavailable(),
                    wall_time_s: started.elapsed().as_secs_f64(),
                    summary: format!("NLPD: inf\nevaluation failed:\n{msg}\n"),
                };
                (eval, format!("{notes} [error: {msg}]"))
            }
        };

        let best = self.best_so_far();
        let accepted = iteration == 0 || decide(eval.nlpd, best)? == Decision::Accept;
        if manage && !accepted {
            if let Some(h) = &revert_to {
                workspace::restore(h, &snaps, &model_path)?;
            }
        }
        let record = IterationRecord {
            iteration,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            nlpd: eval.nlpd,
            accepted,
            best_so_far: if accepted { eval.nlpd } else { best },
            notes,
            rationale: rationale.to_string(),
            model_hash,
            diagnostics: eval.diagnostics,
            wall_time_s: eval.wall_time_s,
        };
        self.log.append(record.clone())?;
        self.last_summary = eval.summary;
        Ok(record)
    }

    /// Why the loop should stop now, if it should.
    pub fn stop_reason(&self) -> Option<StopReason> {
        let n = self.log.len();
        if n >= self.cfg.max_iterations {
            Some(StopReason::MaxIterations)
        } else if n > 1 && self.log.trailing_rejections() >= self.cfg.patience {
            Some(StopReason::Patience)
        } else {
            None
        }
    }

    /// Runs until a stopping rule fires, writes the report, and leaves the
    /// best model installed.
    pub fn run(&mut self, proposer: &mut dyn Proposer) -> Result<StopReason, LoopError> {
        // a resumed run starts from the best model so far
        if let Some(best) = self.log.best() {
            workspace::restore(&best.model_hash, &self.layout.snapshots_dir(), &self.layout.model_path())?;
        }
        let reason = loop {
            if let Some(r) = self.stop_reason() {
                break r;
            }
            let iteration = self.log.len();
            let ctx = self.context()?;
            let proposal = proposer
                .next(&ctx)
                .map_err(|source| LoopError::Proposer { iteration, source })?;
            let Proposal { model, notes, rationale, stop } = proposal;
            if stop {
                break StopReason::ProposerStop;
            }
            let model = model.ok_or_else(|| LoopError::Proposer {
                iteration,
                source: ProposerError::Protocol("proposal without a model and without stop".into()),
            })?;
            let rec = self.run_iteration(&model, &notes, &rationale)?;
            log::info!(
                "iteration {}: NLPD {} ({})",
                rec.iteration,
                format_nlpd(rec.nlpd),
                if rec.accepted { "kept" } else { "reverted" }
            );
        };
        if let Some(best) = self.log.best() {
            workspace::restore(&best.model_hash, &self.layout.snapshots_dir(), &self.layout.model_path())?;
            let report = render_report(&self.layout.dataset, self.log.records(), &self.layout.snapshots_dir());
            workspace::atomic_write(&self.layout.report_path(), report.as_bytes())?;
        }
        Ok(reason)
    }
}

fn cell(text: &str) -> String {
    text.replace('|', "\\|").replace(['\r', '\n'], " ")
}

/// Markdown report: trajectory table, best iteration and its source.
/// Output depends only on the records and the stored snapshots.
pub fn render_report(dataset: &str, records: &[IterationRecord], snapshots: &Path) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Report: {dataset}\n");
    let Some(best) = records
        .iter()
        .filter(|r| r.accepted)
        .fold(None, |b: Option<&IterationRecord>, r| match b {
            Some(b) if b.nlpd <= r.nlpd => Some(b),
            _ => Some(r),
        })
    else {
        md.push_str("No iterations recorded.\n");
        return md;
    };

    md.push_str("## Trajectory\n\n");
    md.push_str("| Iter | NLPD | Δ | Kept | Health | Notes |\n");
    md.push_str("|---:|---:|---:|:---:|:---:|---|\n");
    let mut prev_best: Option<f64> = None;
    for r in records {
        let delta = match prev_best {
            Some(b) if r.nlpd.is_finite() && b.is_finite() => format!("{:+.4}", r.nlpd - b),
            _ => String::new(),
        };
        let marker = match (r.iteration, r.accepted) {
            (0, _) => "baseline",
            (_, true) => "✓",
            (_, false) => "×",
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.iteration,
            format_nlpd(r.nlpd),
            delta,
            marker,
            r.diagnostics.health,
            cell(&r.notes)
        );
        prev_best = Some(r.best_so_far);
    }

    let _ = writeln!(
        md,
        "\n## Best model\n\nIteration {} with NLPD {} (improvement over the baseline: {}).\n",
        best.iteration,
        format_nlpd(best.nlpd),
        match records[0].nlpd {
            b if b.is_finite() && best.nlpd.is_finite() => format!("{:.4}", b - best.nlpd),
            _ => "n/a".to_string(),
        }
    );
    if !best.rationale.is_empty() {
        let _ = writeln!(md, "Rationale: {}\n", cell(&best.rationale));
    }
    let _ = writeln!(md, "Model hash: `{}`\n", best.model_hash);
    match workspace::read_snapshot(&best.model_hash, snapshots) {
        Ok(bytes) => {
            let src = String::from_utf8_lossy(&bytes);
            md.push_str("```stan\n");
            md.push_str(&src);
            if !src.ends_with('\n') {
                md.push('\n');
            }
            md.push_str("```\n");
        }
        Err(e) => {
            let _ = writeln!(md, "Source unavailable: {e}");
        }
    }
    md
}

/// Regenerates the report from the log on disk without touching the log.
pub fn write_report(layout: &WorkspaceLayout) -> Result<PathBuf, LoopError> {
    let log = ExperimentLog::open(&layout.log_path())?;
    if log.is_empty() {
        return Err(LoopError::Log {
            path: layout.log_path().display().to_string(),
            line: 0,
            message: "log is empty".into(),
        });
    }
    let report = render_report(&layout.dataset, log.records(), &layout.snapshots_dir());
    let path = layout.report_path();
    workspace::atomic_write(&path, report.as_bytes())?;
    Ok(path)
}
