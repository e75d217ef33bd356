//! `bayesloop`: generate datasets, score models, and run the accept/revert
//! loop from the shell.
//!
//! Exit codes: 0 success, 1 domain error (bad model, failed fit, tampered
//! files), 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use bayesloop::backend::grid::LinearGaussianModel;
use bayesloop::backend::{Backend, CmdStan, CmdStanBackend, GridBackend, ModelSource, SamplerConfig};
use bayesloop::datagen::{self, DatasetKind, DatasetSpec, GeneratedDataset, DEFAULT_SEED};
use bayesloop::experiment::{
    format_nlpd, format_summary, write_report, BackendEvaluator, Evaluator, Experiment, LoopConfig, ReplayEvaluator,
};
use bayesloop::proposer::{self, ExternalProposer, Proposer, ScriptedProposer, WorkspaceProposer};
use bayesloop::trajectories;
use bayesloop::workspace::{self, ProtectionStatus, WorkspaceLayout};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

const CONFIG_FILE: &str = "bayesloop.toml";

#[derive(Debug, Parser)]
#[command(name = "bayesloop", version, about = "Search for better Stan models against held-out data")]
struct Cli {
    /// Workspace root [config: root; default: .]
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// Config file; defaults to ./bayesloop.toml when present
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation (gen-data) or sampling (evaluate, loop)
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset and write it into the workspace
    GenData(GenDataArgs),
    /// Score the working model once and log the result
    Evaluate(EvaluateArgs),
    /// Run the accept/revert loop until a stopping rule fires
    Loop(LoopArgs),
    /// Rebuild report.md from log.jsonl
    Report(DatasetArg),
    /// Print the oracle NLPD of a synthetic dataset
    Oracle(DatasetArg),
    /// Check that protected files cannot be read by an unprivileged process
    VerifyProtection(DatasetArg),
    /// Print instructions for an agent editing the workspace directly
    Instructions(DatasetArg),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// One of the presets (regression-1d-large, regression-1d-small,
    /// hierarchical-small, hierarchical-large, varying-slopes) or soccer
    kind: String,
    /// Full dataset spec (TOML) replacing the preset's parameters
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Match results file (soccer only)
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Last training matchday (soccer only)
    #[arg(long, default_value_t = 23)]
    split_matchday: u32,
}

#[derive(Debug, Args)]
struct DatasetArg {
    #[arg(long)]
    dataset: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BackendKind {
    Cmdstan,
    /// Grid approximation; only knows the linear-Gaussian regression fixture
    Grid,
    /// Recorded NLPD values of a trajectory (loop only)
    Replay,
}

#[derive(Debug, Args)]
struct SamplerArgs {
    /// [config: backend; default: cmdstan]
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// [config: chains; default: 4]
    #[arg(long)]
    chains: Option<usize>,
    /// Post-warmup draws per chain [config: draws; default: per dataset]
    #[arg(long)]
    draws: Option<usize>,
    /// [config: warmup; default: 1000]
    #[arg(long)]
    warmup: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: String,
    /// What changed in the model
    #[arg(long)]
    notes: String,
    /// Why the change should help
    #[arg(long)]
    rationale: String,
    /// Model file [default: <root>/model.stan]
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Debug, Args)]
struct LoopArgs {
    /// Dataset; for a scripted replay it defaults to the trajectory's dataset
    #[arg(long)]
    dataset: Option<String>,
    /// scripted:<fixture-set>, external:<command> or workspace:<command>
    /// [config: proposer]
    #[arg(long)]
    proposer: Option<String>,
    /// [config: max_iterations; default: 20]
    #[arg(long)]
    max_iterations: Option<usize>,
    /// [config: patience; default: 3]
    #[arg(long)]
    patience: Option<usize>,
    /// Seconds allowed per external proposal [config: proposer_timeout_s; default: 3600]
    #[arg(long)]
    proposer_timeout: Option<u64>,
    #[command(flatten)]
    sampler: SamplerArgs,
}

/// Optional settings file. Command-line flags win over these.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    root: Option<PathBuf>,
    seed: Option<u64>,
    cmdstan: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
    backend: Option<BackendKind>,
    grid_resolution: Option<usize>,
    chains: Option<usize>,
    draws: Option<usize>,
    warmup: Option<usize>,
    parallel_chains: Option<usize>,
    max_iterations: Option<usize>,
    patience: Option<usize>,
    proposer: Option<String>,
    proposer_timeout_s: Option<u64>,
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    let (path, required) = match path {
        Some(p) => (p.to_path_buf(), true),
        None => (PathBuf::from(CONFIG_FILE), false),
    };
    match std::fs::read_to_string(&path) {
        Ok(text) => toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display()))),
        Err(e) if !required && e.kind() == std::io::ErrorKind::NotFound => Ok(Config::default()),
        Err(e) => Err(usage(format!("{}: {e}", path.display()))),
    }
}

struct Ctx {
    root: PathBuf,
    seed: Option<u64>,
    config: Config,
}

impl Ctx {
    fn layout(&self, dataset: &str) -> WorkspaceLayout {
        WorkspaceLayout::new(&self.root, dataset)
    }

    /// The dataset as written by gen-data, test split included.
    fn dataset(&self, name: &str) -> anyhow::Result<(WorkspaceLayout, GeneratedDataset)> {
        let layout = self.layout(name);
        if !layout.dataset_files().descriptor.exists() {
            bail!(
                "dataset {} not found under {}; run `bayesloop gen-data {}` first",
                layout.dataset,
                self.root.display(),
                name
            );
        }
        let ds = workspace::read_protected(&layout)?;
        Ok((layout, ds))
    }

    fn sampler(&self, args: &SamplerArgs, spec: &DatasetSpec) -> SamplerConfig {
        let mut cfg = spec.recommended_sampler();
        let c = &self.config;
        cfg.chains = args.chains.or(c.chains).unwrap_or(cfg.chains);
        cfg.sampling_draws = args.draws.or(c.draws).unwrap_or(cfg.sampling_draws);
        cfg.warmup_draws = args.warmup.or(c.warmup).unwrap_or(cfg.warmup_draws);
        cfg.parallel_chains = c.parallel_chains.unwrap_or(cfg.parallel_chains);
        cfg.seed = self.seed.or(c.seed).unwrap_or(cfg.seed);
        cfg
    }

    fn backend_kind(&self, args: &SamplerArgs) -> BackendKind {
        args.backend.or(self.config.backend).unwrap_or(BackendKind::Cmdstan)
    }

    fn backend(&self, kind: BackendKind) -> anyhow::Result<Box<dyn Backend>> {
        match kind {
            BackendKind::Cmdstan => {
                let cmdstan = CmdStan::discover(self.config.cmdstan.as_deref())?;
                let cache = self.config.cache_dir.clone().unwrap_or_else(|| self.root.join(".cache").join("models"));
                Ok(Box::new(CmdStanBackend::new(cmdstan, cache)))
            }
            BackendKind::Grid => {
                let mut grid = GridBackend::new(self.config.grid_resolution.unwrap_or(64));
                let fixture = proposer::fixture("regression_linear_gaussian").expect("shipped fixture");
                grid.register(
                    &ModelSource::new(fixture.text)?,
                    Box::new(|d| Ok(Box::new(LinearGaussianModel::from_data(d)?))),
                );
                Ok(Box::new(grid))
            }
            BackendKind::Replay => Err(usage("the replay backend only works with `loop --proposer scripted:<name>`")),
        }
    }
}

fn cmd_gen_data(ctx: &Ctx, args: &GenDataArgs) -> anyhow::Result<()> {
    let seed = ctx.seed.unwrap_or(DEFAULT_SEED);
    let spec = if let Some(path) = &args.spec {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str::<DatasetSpec>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    } else if datagen::canonical_name(&args.kind) == "soccer" {
        let csv = args.csv.as_ref().ok_or_else(|| usage("soccer needs --csv <results file>"))?;
        DatasetSpec::soccer(csv, args.split_matchday)
    } else {
        DatasetSpec::preset(&args.kind, seed).map_err(|e| {
            usage(format!("{e}; known kinds: {}", datagen::PRESETS.map(|p| p.replace('_', "-")).join(", ")))
        })?
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let ds = datagen::generate(&spec)?;
    let (layout, enforcement) = workspace::init_workspace(&ds, &ctx.root)?;
    println!(
        "wrote {}: {} training rows, {} test rows (protection: {:?})",
        layout.dataset_dir().display(),
        ds.train.rows(),
        ds.test.rows(),
        enforcement
    );
    match ds.oracle.oracle_nlpd {
        Some(v) => println!("oracle NLPD: {}", format_nlpd(v)),
        None => println!("oracle NLPD: none (real data)"),
    }
    Ok(())
}

fn cmd_evaluate(ctx: &Ctx, args: &EvaluateArgs) -> anyhow::Result<()> {
    if args.notes.trim().is_empty() || args.rationale.trim().is_empty() {
        return Err(usage("--notes and --rationale must not be empty"));
    }
    let (layout, ds) = ctx.dataset(&args.dataset)?;
    let model_path = args.model.clone().unwrap_or_else(|| layout.model_path());
    let text = std::fs::read_to_string(&model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let model = ModelSource::new(text)?;
    let backend = ctx.backend(ctx.backend_kind(&args.sampler))?;
    let sampler = ctx.sampler(&args.sampler, ds.spec());
    let mut eval = BackendEvaluator::new(backend.as_ref(), ds.stan_data(), sampler);
    let mut exp = Experiment::open(layout, LoopConfig::default(), &mut eval)?;
    let best_before = exp.best_so_far();
    let rec = exp.record_evaluation(&model, &args.notes, &args.rationale)?;
    if rec.nlpd.is_infinite() && rec.diagnostics.max_rhat.is_infinite() {
        eprint!("{}", exp.last_summary());
        bail!("evaluation failed (logged as iteration {})", rec.iteration);
    }
    print!("{}", format_summary(rec.nlpd, &rec.diagnostics));
    if best_before.is_finite() {
        println!("best so far: {} (change {:+.4})", format_nlpd(best_before), rec.nlpd - best_before);
    }
    println!("logged as iteration {}", rec.iteration);
    Ok(())
}

enum ProposerSpec {
    Scripted(String),
    External(String),
    Workspace(String),
}

fn parse_proposer(s: &str) -> anyhow::Result<ProposerSpec> {
    let (kind, rest) = s
        .split_once(':')
        .ok_or_else(|| usage(format!("proposer {s:?} must look like scripted:<set>, external:<cmd> or workspace:<cmd>")))?;
    if rest.trim().is_empty() {
        return Err(usage(format!("proposer {s:?} is missing its argument")));
    }
    match kind {
        "scripted" => Ok(ProposerSpec::Scripted(rest.to_string())),
        "external" => Ok(ProposerSpec::External(rest.to_string())),
        "workspace" => Ok(ProposerSpec::Workspace(rest.to_string())),
        _ => Err(usage(format!("unknown proposer kind {kind:?}"))),
    }
}

fn shell(cmd: &str) -> Vec<String> {
    vec!["sh".into(), "-c".into(), cmd.into()]
}

fn cmd_loop(ctx: &Ctx, args: &LoopArgs) -> anyhow::Result<()> {
    let proposer_arg = args
        .proposer
        .clone()
        .or_else(|| ctx.config.proposer.clone())
        .ok_or_else(|| usage("loop needs --proposer"))?;
    let spec = parse_proposer(&proposer_arg)?;
    let cfg = LoopConfig {
        max_iterations: args.max_iterations.or(ctx.config.max_iterations).unwrap_or(20),
        patience: args.patience.or(ctx.config.patience).unwrap_or(3),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let backend_kind = ctx.backend_kind(&args.sampler);

    let dataset = match (&args.dataset, &spec) {
        (Some(d), _) => d.clone(),
        (None, ProposerSpec::Scripted(name)) => trajectories::by_name(name)
            .map(|t| t.dataset.to_string())
            .ok_or_else(|| usage(format!("unknown fixture set {name:?}; pass --dataset")))?,
        (None, _) => return Err(usage("loop needs --dataset")),
    };
    let layout = ctx.layout(&dataset);
    if !layout.dataset_files().descriptor.exists() {
        if dataset == "soccer" {
            bail!("soccer dataset not found; run `bayesloop gen-data soccer --csv <file>` first");
        }
        let preset = DatasetSpec::preset(&dataset, DEFAULT_SEED).map_err(|e| usage(e.to_string()))?;
        log::info!("generating {} with seed {}", preset.name, preset.seed);
        workspace::init_workspace(&datagen::generate(&preset)?, &ctx.root)?;
    }

    let timeout = Duration::from_secs(args.proposer_timeout.or(ctx.config.proposer_timeout_s).unwrap_or(3600));
    let mut proposer: Box<dyn Proposer> = match (&spec, backend_kind) {
        (ProposerSpec::Scripted(name), BackendKind::Replay) => {
            let t = trajectories::by_name(name).ok_or_else(|| usage(format!("no recorded trajectory {name:?}")))?;
            Box::new(ScriptedProposer::replay(t)?)
        }
        (ProposerSpec::Scripted(name), _) => {
            Box::new(ScriptedProposer::fixture_set(name).map_err(|e| usage(e.to_string()))?)
        }
        (_, BackendKind::Replay) => return Err(usage("the replay backend needs a scripted proposer")),
        (ProposerSpec::External(cmd), _) => Box::new(ExternalProposer::new(shell(cmd), timeout)),
        (ProposerSpec::Workspace(cmd), _) => Box::new(WorkspaceProposer {
            agent: ExternalProposer::new(shell(cmd), timeout),
            root: ctx.root.clone(),
            model_file: layout.model_path(),
        }),
    };

    let backend;
    let mut evaluator: Box<dyn Evaluator + '_> = if backend_kind == BackendKind::Replay {
        let ProposerSpec::Scripted(name) = &spec else { unreachable!("checked above") };
        let t = trajectories::by_name(name).expect("checked above");
        Box::new(ReplayEvaluator::from_trajectory(t))
    } else {
        let ds = workspace::read_protected(&layout)?;
        backend = ctx.backend(backend_kind)?;
        let sampler = ctx.sampler(&args.sampler, ds.spec());
        Box::new(BackendEvaluator::new(backend.as_ref(), ds.stan_data(), sampler))
    };

    let mut exp = Experiment::open(layout.clone(), cfg, evaluator.as_mut())?;
    let reason = exp.run(proposer.as_mut())?;
    let best = exp.log.best();
    println!("stopped after {} records: {reason}", exp.log.len());
    if let Some(b) = best {
        println!("best: iteration {} with NLPD {}", b.iteration, format_nlpd(b.nlpd));
        println!("report: {}", layout.report_path().display());
    }
    Ok(())
}

fn cmd_report(ctx: &Ctx, args: &DatasetArg) -> anyhow::Result<()> {
    let path = write_report(&ctx.layout(&args.dataset))?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_oracle(ctx: &Ctx, args: &DatasetArg) -> anyhow::Result<()> {
    let (_, ds) = ctx.dataset(&args.dataset)?;
    if matches!(ds.spec().kind, DatasetKind::Soccer(_)) {
        bail!("no oracle for real data ({})", ds.name());
    }
    let oracle = ds.oracle.oracle_nlpd.ok_or_else(|| anyhow!("dataset {} has no oracle", ds.name()))?;
    println!("oracle NLPD: {}", format_nlpd(oracle));
    println!("definition: {}", ds.oracle.definition);
    for (name, v) in &ds.oracle.alternatives {
        println!("{name}: {}", format_nlpd(*v));
    }
    Ok(())
}

fn cmd_verify(ctx: &Ctx, args: &DatasetArg) -> anyhow::Result<()> {
    let layout = ctx.layout(&args.dataset);
    let report = workspace::verify_protection(&layout);
    print!("{report}");
    if report.entries.iter().any(|e| e.status == ProtectionStatus::Tampered) {
        bail!("protected files are exposed");
    }
    Ok(())
}

fn cmd_instructions(ctx: &Ctx, args: &DatasetArg) -> anyhow::Result<()> {
    let cfg = LoopConfig {
        max_iterations: ctx.config.max_iterations.unwrap_or(20),
        patience: ctx.config.patience.unwrap_or(3),
    };
    print!("{}", proposer::agent_instructions(&datagen::canonical_name(&args.dataset), &cfg));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(cli.config.as_deref())?;
    let root = cli.root.clone().or_else(|| config.root.clone()).unwrap_or_else(|| PathBuf::from("."));
    let ctx = Ctx { root, seed: cli.seed, config };
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Loop(a) => cmd_loop(&ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
        Command::Oracle(a) => cmd_oracle(&ctx, a),
        Command::VerifyProtection(a) => cmd_verify(&ctx, a),
        Command::Instructions(a) => cmd_instructions(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
