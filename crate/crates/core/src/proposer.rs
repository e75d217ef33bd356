//! Sources of candidate models: scripted sequences, an external process
//! speaking JSON over stdin/stdout, and an in-place workspace editor.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::backend::{BackendError, ModelSource};
use crate::experiment::IterationRecord;
use crate::trajectories::{Marker, RecordedTrajectory};

#[derive(Debug, Error)]
pub enum ProposerError {
    #[error("cannot start proposer {command:?}: {message}")]
    Spawn { command: String, message: String },
    #[error("proposer timed out after {seconds} s; output so far:\n{stdout}\nstderr:\n{stderr}")]
    Timeout { seconds: f64, stdout: String, stderr: String },
    #[error("proposer exited with {status}; stderr:\n{stderr}")]
    Exit { status: String, stderr: String },
    #[error("malformed proposer response ({message}); output:\n{output}")]
    Malformed { message: String, output: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("unknown fixture set {0:?}")]
    UnknownFixtureSet(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    /// `None` only together with `stop`.
    pub model: Option<ModelSource>,
    pub notes: String,
    pub rationale: String,
    pub stop: bool,
}

impl Proposal {
    pub fn stop() -> Self {
        Self { model: None, notes: String::new(), rationale: String::new(), stop: true }
    }
}

/// Everything a proposer is shown before producing the next model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposerContext {
    pub dataset_md: String,
    pub history: Vec<IterationRecord>,
    pub current_model: String,
    pub last_summary: String,
}

pub trait Proposer {
    fn next(&mut self, ctx: &ProposerContext) -> Result<Proposal, ProposerError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEntry {
    pub model: String,
    pub notes: String,
    pub rationale: String,
}

/// Entry `index` of `script`, or a stop once the script is used up.
pub fn scripted_next(script: &[ScriptEntry], index: usize) -> Result<Proposal, ProposerError> {
    let Some(e) = script.get(index) else {
        return Ok(Proposal::stop());
    };
    let model = ModelSource::new(e.model.clone())
        .map_err(|err| ProposerError::Protocol(format!("script entry {index}: {err}")))?;
    Ok(Proposal { model: Some(model), notes: e.notes.clone(), rationale: e.rationale.clone(), stop: false })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedProposer {
    script: Vec<ScriptEntry>,
    index: usize,
}

impl ScriptedProposer {
    pub fn new(script: Vec<ScriptEntry>) -> Self {
        Self { script, index: 0 }
    }

    /// Models of a fixture set in order, one proposal each.
    pub fn fixture_set(name: &str) -> Result<Self, ProposerError> {
        let set = fixture_set(name).ok_or_else(|| ProposerError::UnknownFixtureSet(name.to_string()))?;
        Ok(Self::new(
            set.iter()
                .map(|f| ScriptEntry {
                    model: f.text.to_string(),
                    notes: f.description.to_string(),
                    rationale: format!("fixture {}", f.name),
                })
                .collect(),
        ))
    }

    /// One entry per recorded step, for use with a replay evaluator.
    pub fn replay(t: &RecordedTrajectory) -> Result<Self, ProposerError> {
        Ok(Self::new(replay_script(t)?))
    }

    pub fn script(&self) -> &[ScriptEntry] {
        &self.script
    }
}

impl Proposer for ScriptedProposer {
    fn next(&mut self, _ctx: &ProposerContext) -> Result<Proposal, ProposerError> {
        let p = scripted_next(&self.script, self.index)?;
        self.index += 1;
        Ok(p)
    }
}

/// Script whose entries line up with the steps of `t`. A step whose change
/// names a fixture of the matching set uses that fixture verbatim; any other
/// step reuses the latest kept fixture under a header comment naming the
/// change, so each entry has its own hash.
pub fn replay_script(t: &RecordedTrajectory) -> Result<Vec<ScriptEntry>, ProposerError> {
    let set = fixture_set(t.name).ok_or_else(|| ProposerError::UnknownFixtureSet(t.name.to_string()))?;
    let mut current = set[0];
    Ok(t.steps
        .iter()
        .map(|s| {
            let matched = set.iter().find(|f| f.description == s.change);
            let text = match matched {
                Some(f) => {
                    if s.marker != Marker::Rejected {
                        current = f;
                    }
                    f.text.to_string()
                }
                None => format!("// iteration {}: {}\n{}", s.iteration, s.change, current.text),
            };
            ScriptEntry { model: text, notes: s.change.to_string(), rationale: format!("replay of {}", t.name) }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExternalResponse {
    #[serde(default)]
    model_text: String,
    notes: String,
    rationale: String,
    #[serde(default)]
    stop: bool,
}

/// Runs a command per proposal: the context goes to its stdin as one JSON
/// document, and one JSON document is read back from its stdout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalProposer {
    pub argv: Vec<String>,
    pub timeout: Duration,
    pub current_dir: Option<PathBuf>,
    /// Run the child under this uid and gid (unix only, needs privileges).
    pub run_as: Option<(u32, u32)>,
}

impl ExternalProposer {
    pub fn new(argv: Vec<String>, timeout: Duration) -> Self {
        Self { argv, timeout, current_dir: None, run_as: None }
    }
}

fn read_all(mut r: impl Read + Send + 'static) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = r.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

/// One request/response exchange with `proposer`'s command.
pub fn external_next(proposer: &ExternalProposer, ctx: &ProposerContext) -> Result<Proposal, ProposerError> {
    let (program, args) = proposer
        .argv
        .split_first()
        .ok_or_else(|| ProposerError::Protocol("empty proposer command".into()))?;
    let command = proposer.argv.join(" ");
    let request = serde_json::to_vec(ctx).map_err(|e| ProposerError::Protocol(e.to_string()))?;

    let mut cmd = Command::new(program);
    cmd.args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped());
    if let Some(dir) = &proposer.current_dir {
        cmd.current_dir(dir);
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        // own process group, so a timeout can take down grandchildren too
        cmd.process_group(0);
        if let Some((uid, gid)) = proposer.run_as {
            cmd.uid(uid).gid(gid);
        }
    }
    let mut child = cmd.spawn().map_err(|e| ProposerError::Spawn { command: command.clone(), message: e.to_string() })?;

    let mut stdin = child.stdin.take().expect("piped stdin");
    let writer = std::thread::spawn(move || {
        // a child that exits without reading its input is not our error
        let _ = stdin.write_all(&request);
    });
    let stdout = read_all(child.stdout.take().expect("piped stdout"));
    let stderr = read_all(child.stderr.take().expect("piped stderr"));

    let status = child
        .wait_timeout(proposer.timeout)
        .map_err(|e| ProposerError::Spawn { command: command.clone(), message: e.to_string() })?;
    let status = match status {
        Some(s) => s,
        None => {
            #[cfg(unix)]
            // SAFETY: signalling a process group we created; no memory is touched.
            unsafe {
                libc::kill(-(child.id() as i32), libc::SIGKILL);
            }
            let _ = child.kill();
            let _ = child.wait();
            let _ = writer.join();
            return Err(ProposerError::Timeout {
                seconds: proposer.timeout.as_secs_f64(),
                stdout: stdout.join().unwrap_or_default(),
                stderr: stderr.join().unwrap_or_default(),
            });
        }
    };
    let _ = writer.join();
    let out = stdout.join().unwrap_or_default();
    let err = stderr.join().unwrap_or_default();
    if !status.success() {
        return Err(ProposerError::Exit { status: status.to_string(), stderr: err });
    }
    let resp: ExternalResponse = serde_json::from_str(out.trim())
        .map_err(|e| ProposerError::Malformed { message: e.to_string(), output: out.clone() })?;
    if resp.stop {
        let model = ModelSource::new(resp.model_text).ok();
        return Ok(Proposal { model, notes: resp.notes, rationale: resp.rationale, stop: true });
    }
    let model = ModelSource::new(resp.model_text).map_err(|e| match e {
        BackendError::EmptyModel => ProposerError::Protocol("empty model_text without stop".into()),
        other => ProposerError::Protocol(other.to_string()),
    })?;
    Ok(Proposal { model: Some(model), notes: resp.notes, rationale: resp.rationale, stop: false })
}

impl Proposer for ExternalProposer {
    fn next(&mut self, ctx: &ProposerContext) -> Result<Proposal, ProposerError> {
        external_next(self, ctx)
    }
}

/// Optional side file the workspace agent may write next to the model.
pub const WORKSPACE_PROPOSAL_FILE: &str = "proposal.json";

#[derive(Debug, Default, Deserialize)]
struct WorkspaceNotes {
    #[serde(default)]
    notes: String,
    #[serde(default)]
    rationale: String,
    #[serde(default)]
    stop: bool,
}

/// Lets an agent edit `model.stan` in place. The command runs in the
/// workspace root with the context on stdin; afterwards the harness reads
/// the model file, plus notes, rationale and stop from
/// [`WORKSPACE_PROPOSAL_FILE`] if present (the file is consumed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkspaceProposer {
    pub agent: ExternalProposer,
    pub root: PathBuf,
    pub model_file: PathBuf,
}

impl Proposer for WorkspaceProposer {
    fn next(&mut self, ctx: &ProposerContext) -> Result<Proposal, ProposerError> {
        let io = |p: &std::path::Path, e: std::io::Error| ProposerError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        };
        let mut agent = self.agent.clone();
        agent.current_dir = Some(self.root.clone());
        run_for_effect(&agent, ctx)?;

        let side = self.root.join(WORKSPACE_PROPOSAL_FILE);
        let meta = match std::fs::read_to_string(&side) {
            Ok(text) => {
                std::fs::remove_file(&side).map_err(|e| io(&side, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| ProposerError::Malformed { message: e.to_string(), output: text.clone() })?
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => WorkspaceNotes::default(),
            Err(e) => return Err(io(&side, e)),
        };
        if meta.stop {
            return Ok(Proposal { model: None, notes: meta.notes, rationale: meta.rationale, stop: true });
        }
        let text = std::fs::read_to_string(&self.model_file).map_err(|e| io(&self.model_file, e))?;
        let model = ModelSource::new(text).map_err(|e| ProposerError::Protocol(e.to_string()))?;
        let notes = if meta.notes.is_empty() { "edited in place".to_string() } else { meta.notes };
        Ok(Proposal { model: Some(model), notes, rationale: meta.rationale, stop: false })
    }
}

fn run_for_effect(agent: &ExternalProposer, ctx: &ProposerContext) -> Result<(), ProposerError> {
    match external_next(agent, ctx) {
        Ok(_) => Ok(()),
        // the agent's stdout is free-form in workspace mode
        Err(ProposerError::Malformed { .. }) => Ok(()),
        Err(e) => Err(e),
    }
}

/// A shipped model program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fixture {
    pub name: &'static str,
    pub description: &'static str,
    pub text: &'static str,
}

macro_rules! fixture {
    ($name:literal, $desc:literal) => {
        Fixture { name: $name, description: $desc, text: include_str!(concat!("../assets/models/", $name, ".stan")) }
    };
}

const FIXTURES: [Fixture; 12] = [
    fixture!("regression_linear_gaussian", "linear mean, Gaussian noise"),
    fixture!("regression_cubic_student_t", "cubic mean, Student-t noise"),
    fixture!("regression_sine_student_t", "sine basis mean, Student-t noise"),
    fixture!("regression_sine_t_quadratic_logsigma", "quadratic log sigma"),
    fixture!("regression_mixture_fixed_sigma_out", "mixture with outlier scale fixed at 10"),
    fixture!("regression_mixture_cubic_logsigma", "cubic log sigma in the fixed-scale mixture"),
    fixture!("hierarchical_centered", "centered partial pooling"),
    fixture!("hierarchical_noncentered", "non-centered group means"),
    fixture!("slopes_pooled", "fully pooled line"),
    fixture!("slopes_correlated", "correlated intercepts and slopes"),
    fixture!("soccer_poisson_attack_defense", "Poisson, independent team priors"),
    fixture!("soccer_poisson_hierarchical", "hierarchical attack and defense"),
];

pub fn fixture_models() -> &'static [Fixture] {
    &FIXTURES
}

pub fn fixture(name: &str) -> Option<&'static Fixture> {
    FIXTURES.iter().find(|f| f.name == name)
}

/// Ordered fixture sequences, named like the recorded trajectories.
pub fn fixture_set(name: &str) -> Option<Vec<&'static Fixture>> {
    let names: &[&str] = match name.trim().to_ascii_lowercase().replace('_', "-").as_str() {
        "regression-large" => &[
            "regression_linear_gaussian",
            "regression_cubic_student_t",
            "regression_sine_student_t",
            "regression_sine_t_quadratic_logsigma",
            "regression_mixture_fixed_sigma_out",
            "regression_mixture_cubic_logsigma",
        ],
        "regression-small" => &[
            "regression_linear_gaussian",
            "regression_cubic_student_t",
            "regression_sine_t_quadratic_logsigma",
            "regression_mixture_fixed_sigma_out",
        ],
        "hier-small" | "hier-large" => &["hierarchical_centered", "hierarchical_noncentered"],
        "slopes" => &["slopes_pooled", "slopes_correlated"],
        "soccer" => &["soccer_poisson_attack_defense", "soccer_poisson_hierarchical"],
        _ => return None,
    };
    Some(names.iter().map(|n| fixture(n).expect("listed fixture exists")).collect())
}

pub const FIXTURE_SETS: [&str; 6] = ["regression-large", "regression-small", "hier-small", "hier-large", "slopes", "soccer"];

/// Instructions for an agent working directly in the workspace.
pub fn agent_instructions(dataset: &str, cfg: &crate::experiment::LoopConfig) -> String {
    include_str!("../assets/agent_instructions.md")
        .replace("{dataset}", dataset)
        .replace("{patience}", &cfg.patience.to_string())
        .replace("{max_iterations}", &cfg.max_iterations.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::DiagnosticsSummary;
    use crate::trajectories;
    use proptest::prelude::*;

    fn ctx() -> ProposerContext {
        ProposerContext {
            dataset_md: "# d".into(),
            history: Vec::new(),
            current_model: String::new(),
            last_summary: String::new(),
        }
    }

    fn entry(m: &str) -> ScriptEntry {
        ScriptEntry { model: m.into(), notes: "n".into(), rationale: "r".into() }
    }

    #[test]
    fn script_then_stop() {
        let mut p = ScriptedProposer::new(vec![entry("a"), entry("b"), entry("c")]);
        let texts: Vec<_> = (0..3).map(|_| p.next(&ctx()).unwrap().model.unwrap().text().to_string()).collect();
        assert_eq!(texts, ["a", "b", "c"]);
        assert!(p.next(&ctx()).unwrap().stop);
        assert!(ScriptedProposer::new(vec![]).next(&ctx()).unwrap().stop);
    }

    #[test]
    fn every_fixture_emits_log_lik() {
        for f in fixture_models() {
            let gq = f.text.split("generated quantities").nth(1).unwrap_or_else(|| panic!("{}", f.name));
            assert!(gq.contains("vector[N_test] log_lik;"), "{}", f.name);
            assert!(f.text.contains("data {"), "{}", f.name);
        }
    }

    #[test]
    fn mixture_fixture_fixes_outlier_scale() {
        let f = fixture("regression_mixture_fixed_sigma_out").unwrap();
        assert!(f.text.contains("real sigma_out = 10;"));
        assert!(f.text.contains("log_mix(pi_out, normal_lpdf(response_test[n] | mu[n], sigma_out)"));
        assert!(!f.text.split("parameters {").nth(1).unwrap().split('}').next().unwrap().contains("sigma_out"));
    }

    #[test]
    fn regression_set_is_the_kept_spine() {
        let set = fixture_set("regression-large").unwrap();
        let kept: Vec<usize> = [0usize, 1, 2, 5, 9, 11].to_vec();
        for (f, i) in set.iter().zip(kept) {
            assert_eq!(f.description, trajectories::REGRESSION_LARGE.steps[i].change);
        }
    }

    #[test]
    fn replay_scripts_match_trajectories() {
        for t in trajectories::ALL {
            let s = replay_script(t).unwrap();
            assert_eq!(s.len(), t.steps.len());
            let mut hashes: Vec<_> = s.iter().map(|e| crate::backend::content_hash(e.model.as_bytes())).collect();
            hashes.sort();
            hashes.dedup();
            assert_eq!(hashes.len(), s.len(), "{}", t.name);
        }
        let s = replay_script(&trajectories::REGRESSION_LARGE).unwrap();
        assert_eq!(s[11].model, fixture("regression_mixture_cubic_logsigma").unwrap().text);
    }

    #[test]
    fn instructions_are_filled_in() {
        let text = agent_instructions("hierarchical_small", &Default::default());
        assert!(text.contains("results/hierarchical_small/log.jsonl"));
        assert!(text.contains("3 rounds in a row"));
        assert!(!text.contains("{dataset}"));
    }

    #[cfg(unix)]
    #[test]
    fn external_round_trip() {
        let script = r#"cat > /dev/null; printf '{"model_text":"model { }","notes":"n","rationale":"r","stop":false}'"#;
        let mut p = ExternalProposer::new(vec!["sh".into(), "-c".into(), script.into()], Duration::from_secs(10));
        let prop = p.next(&ctx()).unwrap();
        assert_eq!(prop.model.unwrap().text(), "model { }");
        assert!(!prop.stop);
    }

    #[cfg(unix)]
    #[test]
    fn external_errors() {
        let run = |script: &str, secs: u64| {
            let p = ExternalProposer::new(vec!["sh".into(), "-c".into(), script.into()], Duration::from_secs(secs));
            external_next(&p, &ctx())
        };
        match run("echo boom >&2; exit 1", 10) {
            Err(ProposerError::Exit { stderr, .. }) => assert!(stderr.contains("boom")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(run("echo not-json", 10), Err(ProposerError::Malformed { .. })));
        assert!(matches!(run("sleep 5", 1), Err(ProposerError::Timeout { .. })));
        let stop = run(r#"echo '{"model_text":"","notes":"done","rationale":"","stop":true}'"#, 10).unwrap();
        assert!(stop.stop && stop.model.is_none());
        assert!(matches!(
            run(r#"echo '{"model_text":"","notes":"","rationale":""}'"#, 10),
            Err(ProposerError::Protocol(_))
        ));
    }

    fn record() -> impl Strategy<Value = IterationRecord> {
        (
            0usize..50,
            prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), Just(f64::INFINITY)],
            any::<bool>(),
            ".*",
            ".*",
            any::<u32>(),
            0.0f64..1e6,
        )
            .prop_map(|(iteration, nlpd, accepted, notes, rationale, div, ess)| IterationRecord {
                iteration,
                timestamp: "2025-03-01T12:00:00.000Z".into(),
                nlpd,
                accepted,
                best_so_far: nlpd,
                notes,
                rationale,
                model_hash: crate::backend::content_hash(&div.to_le_bytes()),
                diagnostics: DiagnosticsSummary {
                    max_rhat: if accepted { 1.0 + ess * 1e-9 } else { f64::INFINITY },
                    min_ess: ess,
                    divergences: div as usize,
                    health: crate::diagnostics::Health::Warn,
                },
                wall_time_s: ess / 7.0,
            })
    }

    proptest! {
        #[test]
        fn context_round_trip(md in ".*", model in ".*", summary in ".*", history in proptest::collection::vec(record(), 0..5)) {
            let ctx = ProposerContext { dataset_md: md, history, current_model: model, last_summary: summary };
            let json = serde_json::to_string(&ctx).unwrap();
            let back: ProposerContext = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, ctx);
        }

        #[test]
        fn scripted_next_depends_only_on_index(n in 0usize..6, i in 0usize..8) {
            let script: Vec<_> = (0..n).map(|k| entry(&format!("m{k}"))).collect();
            prop_assert_eq!(scripted_next(&script, i).unwrap(), scripted_next(&script, i).unwrap());
            prop_assert_eq!(scripted_next(&script, i).unwrap().stop, i >= n);
        }
    }
}
