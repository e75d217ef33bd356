use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{ColumnType, DatagenError, DatasetKind, DatasetSpec, GeneratedDataset, OracleMetadata, Table};
use super::soccer::TEAMS_FILE;

pub const TRAIN_FILE: &str = "train.csv";
pub const DESCRIPTOR_FILE: &str = "dataset.md";
pub const PROTECTED_DIR: &str = "protected";
pub const TEST_FILE: &str = "test.csv";
pub const ORACLE_FILE: &str = "oracle.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmittedPaths {
    pub dir: PathBuf,
    pub train: PathBuf,
    pub descriptor: PathBuf,
    pub test: PathBuf,
    pub oracle: PathBuf,
    pub extra: Vec<PathBuf>,
}

impl EmittedPaths {
    pub fn new(dir: &Path) -> Self {
        let protected = dir.join(PROTECTED_DIR);
        Self {
            dir: dir.to_path_buf(),
            train: dir.join(TRAIN_FILE),
            descriptor: dir.join(DESCRIPTOR_FILE),
            test: protected.join(TEST_FILE),
            oracle: protected.join(ORACLE_FILE),
            extra: Vec::new(),
        }
    }

    pub fn protected_files(&self) -> [&Path; 2] {
        [&self.test, &self.oracle]
    }
}

fn write(path: &Path, contents: &str) -> Result<(), DatagenError> {
    std::fs::write(path, contents).map_err(|e| DatagenError::io(path, e))
}

/// Writes `train.csv`, `dataset.md`, any extra public files, and
/// `protected/{test.csv, oracle.json}` under `dir`. Output depends only on
/// the dataset, so re-emitting is byte-identical.
pub fn emit_dataset(ds: &GeneratedDataset, dir: &Path) -> Result<EmittedPaths, DatagenError> {
    let mut paths = EmittedPaths::new(dir);
    let protected = dir.join(PROTECTED_DIR);
    std::fs::create_dir_all(&protected).map_err(|e| DatagenError::io(&protected, e))?;
    write(&paths.train, &ds.train.to_csv())?;
    write(&paths.descriptor, &ds.descriptor)?;
    for (name, contents) in &ds.extra_files {
        let p = dir.join(name);
        write(&p, contents)?;
        paths.extra.push(p);
    }
    write(&paths.test, &ds.test.to_csv())?;
    let json = serde_json::to_string_pretty(&ds.oracle).map_err(|e| DatagenError::io(&paths.oracle, e))?;
    write(&paths.oracle, &(json + "\n"))?;
    Ok(paths)
}

/// Reads back a dataset written by [`emit_dataset`]. Needs read access to
/// `protected/`.
pub fn load_dataset(dir: &Path) -> Result<GeneratedDataset, DatagenError> {
    let paths = EmittedPaths::new(dir);
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| DatagenError::io(p, e));
    let oracle_text = read(&paths.oracle)?;
    let oracle: OracleMetadata = serde_json::from_str(&oracle_text).map_err(|e| DatagenError::Parse {
        path: paths.oracle.display().to_string(),
        row: e.line(),
        message: e.to_string(),
    })?;
    let train = Table::from_csv(&read(&paths.train)?, &oracle.schema, &paths.train.display().to_string())?;
    let test = Table::from_csv(&read(&paths.test)?, &oracle.schema, &paths.test.display().to_string())?;
    let descriptor = read(&paths.descriptor)?;
    let mut extra_files = Vec::new();
    if matches!(oracle.spec.kind, DatasetKind::Soccer(_)) {
        extra_files.push((TEAMS_FILE.to_string(), read(&dir.join(TEAMS_FILE))?));
    }
    Ok(GeneratedDataset { train, test, oracle, descriptor, extra_files })
}

fn column_note(kind: &DatasetKind, column: &str) -> &'static str {
    match (kind, column) {
        (DatasetKind::Regression1d(_), "predictor") => "continuous predictor",
        (DatasetKind::Regression1d(_), "response") => "continuous response (target)",
        (_, "unit") => "group index, 1 to J",
        (DatasetKind::Hierarchical(_), "effect") => "continuous measurement (target)",
        (_, "covariate") => "continuous predictor",
        (_, "outcome") => "continuous response (target)",
        (_, "home_team_id") => "home team index, 1 to 18 (see teams.csv)",
        (_, "away_team_id") => "away team index, 1 to 18",
        (_, "home_goals") => "goals scored by the home team (target)",
        (_, "away_goals") => "goals scored by the away team (target)",
        (_, "matchday") => "round of the season, 1 to 34",
        _ => "",
    }
}

fn stan_decl(kind: &DatasetKind, column: &str, ty: ColumnType, suffix: &str, size: &str) -> String {
    let var = format!("{column}_{suffix}");
    match (ty, column) {
        (ColumnType::Real, _) => format!("vector[{size}] {var}"),
        (ColumnType::Int, "unit") => format!("array[{size}] int<lower=1, upper=J> {var}"),
        (ColumnType::Int, "home_team_id" | "away_team_id") => {
            format!("array[{size}] int<lower=1, upper=N_teams> {var}")
        }
        (ColumnType::Int, "matchday") => format!("array[{size}] int<lower=1> {var}"),
        (ColumnType::Int, _) if matches!(kind, DatasetKind::Soccer(_)) => format!("array[{size}] int<lower=0> {var}"),
        (ColumnType::Int, _) => format!("array[{size}] int {var}"),
    }
}

/// Markdown description shown to whoever proposes models. It never mentions
/// the generating process.
pub(crate) fn describe(spec: &DatasetSpec, train: &Table, test: &Table) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Dataset: {}\n", spec.title);

    md.push_str("## Overview\n\n");
    md.push_str(match &spec.kind {
        DatasetKind::Regression1d(_) => {
            "Pairs of a continuous predictor and a continuous response.\n\
             Models are scored on the held-out `response` values.\n"
        }
        DatasetKind::Hierarchical(_) => {
            "Continuous measurements taken on a number of units, several per unit.\n\
             Models are scored on held-out measurements from the same units.\n"
        }
        DatasetKind::VaryingSlopes(_) => {
            "A continuous outcome and a continuous covariate, observed within units.\n\
             Models are scored on held-out outcomes from the same units.\n"
        }
        DatasetKind::Soccer(_) => {
            "Results of one league season with 18 teams.\n\
             Models are scored on the scores of the held-out later matches.\n"
        }
    });

    let _ = writeln!(md, "\n## Data Format\n\n`{TRAIN_FILE}` columns:");
    for name in train.names() {
        let _ = writeln!(md, "- `{name}`: {}", column_note(&spec.kind, name));
    }
    if let DatasetKind::Soccer(s) = &spec.kind {
        let _ = writeln!(
            md,
            "\n`{TEAMS_FILE}` maps each team index to the id in the source file.\n\
             Training matches are matchdays 1 to {}; test matches are the rest.",
            s.split_matchday
        );
    }
    let _ = writeln!(md, "\n{} training rows.", train.rows());
    let _ = writeln!(md, "{} test rows (hidden from the modeller).", test.rows());

    md.push_str("\n## Data Interface\n\nThe harness passes these values to the model's data block:\n\n```stan\n");
    md.push_str("int<lower=0> N_train;\nint<lower=0> N_test;\n");
    match &spec.kind {
        DatasetKind::Hierarchical(_) | DatasetKind::VaryingSlopes(_) => md.push_str("int<lower=1> J;\n"),
        DatasetKind::Soccer(_) => md.push_str("int<lower=1> N_teams;\n"),
        DatasetKind::Regression1d(_) => {}
    }
    for (name, ty) in train.schema() {
        for (suffix, size) in [("train", "N_train"), ("test", "N_test")] {
            let _ = writeln!(md, "{};", stan_decl(&spec.kind, &name, ty, suffix, size));
        }
    }
    md.push_str("```\n");
    if let DatasetKind::Hierarchical(h) = &spec.kind {
        let _ = writeln!(md, "\nJ = {}.", h.groups);
    }
    if let DatasetKind::VaryingSlopes(s) = &spec.kind {
        let _ = writeln!(md, "\nJ = {}.", s.groups);
    }

    md.push_str("\n## Evaluation\n\n```sh\n");
    let _ = writeln!(md, "bayesloop evaluate --dataset {} --notes \"...\" --rationale \"...\"", spec.name);
    md.push_str("```\n\nBoth flags are required. The command prints the NLPD and sampler diagnostics.\n");
    let sampler = spec.recommended_sampler();
    if sampler.sampling_draws != crate::backend::SamplerConfig::default().sampling_draws {
        let _ = writeln!(
            md,
            "\nThis dataset is scored with {} post-warmup draws per chain to keep Monte Carlo noise in the NLPD small.",
            sampler.sampling_draws
        );
    }

    md.push_str("\n## log_lik contract\n\n");
    md.push_str("The generated quantities block must define `vector[N_test] log_lik`.\n");
    md.push_str(match &spec.kind {
        DatasetKind::Soccer(_) => {
            "Entry n is the log probability of both scores of test match n under the current draw.\n"
        }
        _ => "Entry n is the log density of test target n under the current draw.\n",
    });
    md
}
