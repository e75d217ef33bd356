//! Datasets with known generative processes, plus the real soccer results.
//!
//! Every random column draws from its own ChaCha20 stream of the dataset
//! seed (see [`stream`]), so a given `(spec, seed)` yields the same bytes on
//! every platform.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{SamplerConfig, StanData, StanValue};
use crate::scoring::OracleRegressionParams;

mod emit;
mod hierarchical;
mod regression;
mod soccer;

pub use emit::{emit_dataset, load_dataset, EmittedPaths, DESCRIPTOR_FILE, ORACLE_FILE, TEST_FILE, TRAIN_FILE};
pub use hierarchical::{gen_hierarchical, gen_varying_slopes};
pub use regression::gen_regression_1d;
pub use soccer::{load_soccer, TEAMS_FILE};

/// RNG stream ids, one per random column.
pub mod streams {
    pub const PREDICTOR: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const CONTAMINATION_ROWS: u64 = 3;
    pub const CONTAMINATION_MAGNITUDE: u64 = 4;
    pub const CONTAMINATION_SIGN: u64 = 5;
    pub const GROUP_EFFECT: u64 = 6;
    pub const GROUP_SLOPE: u64 = 7;
}

/// Generator for one column: ChaCha20 seeded from `seed`, on stream `id`.
pub fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("{path}, row {row}: {message}")]
    Parse { path: String, row: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("dataset has no oracle (real data)")]
    NoOracle,
}

impl DatagenError {
    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        DatagenError::Io { path: path.display().to_string(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub contamination_rate: f64,
    pub contamination_magnitude: (f64, f64),
    /// Predictors are uniform on `[lo, hi)`.
    pub predictor_range: (f64, f64),
    pub process: OracleRegressionParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalSpec {
    pub groups: usize,
    pub train_per_group: usize,
    pub test_per_group: usize,
    pub effect_mean: f64,
    pub effect_sd: f64,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopesSpec {
    pub groups: usize,
    pub train_per_group: usize,
    pub test_per_group: usize,
    pub intercept_mean: f64,
    pub intercept_sd: f64,
    pub slope_mean: f64,
    pub slope_sd: f64,
    pub noise_sd: f64,
    pub covariate_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoccerSpec {
    pub csv_path: PathBuf,
    /// Matchdays up to and including this one are training data.
    pub split_matchday: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    Regression1d(RegressionSpec),
    Hierarchical(HierarchicalSpec),
    VaryingSlopes(SlopesSpec),
    Soccer(SoccerSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub title: String,
    pub seed: u64,
    pub kind: DatasetKind,
}

pub const DEFAULT_SEED: u64 = 71;
pub const SOCCER_MATCHDAYS: u32 = 34;
pub const SOCCER_TEAMS: usize = 18;

/// Names accepted by [`DatasetSpec::preset`].
pub const PRESETS: [&str; 6] = [
    "regression_1d_large",
    "regression_1d_small",
    "hierarchical_small",
    "hierarchical_large",
    "varying_slopes",
    "soccer",
];

/// Canonical dataset name: lowercase with `_` separators.
pub fn canonical_name(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace('-', "_")
}

fn regression(n_train: usize, n_test: usize) -> RegressionSpec {
    RegressionSpec {
        n_train,
        n_test,
        contamination_rate: 0.06,
        contamination_magnitude: (10.0, 15.0),
        predictor_range: (0.0, 6.0),
        process: OracleRegressionParams::default(),
    }
}

fn hierarchical(train_per_group: usize, test_per_group: usize) -> HierarchicalSpec {
    HierarchicalSpec { groups: 20, train_per_group, test_per_group, effect_mean: 0.0, effect_sd: 1.0, noise_sd: 1.0 }
}

impl DatasetSpec {
    /// Built-in synthetic datasets. Soccer needs a results file, see
    /// [`DatasetSpec::soccer`].
    pub fn preset(name: &str, seed: u64) -> Result<Self, DatagenError> {
        let name = canonical_name(name);
        let (title, kind) = match name.as_str() {
            "regression_1d_large" => ("1D Regression (Large)", DatasetKind::Regression1d(regression(500, 200))),
            "regression_1d_small" => ("1D Regression (Small)", DatasetKind::Regression1d(regression(68, 30))),
            "hierarchical_small" => ("Grouped Measurements (Small)", DatasetKind::Hierarchical(hierarchical(8, 2))),
            "hierarchical_large" => ("Grouped Measurements (Large)", DatasetKind::Hierarchical(hierarchical(40, 10))),
            "varying_slopes" => (
                "Grouped Regression",
                DatasetKind::VaryingSlopes(SlopesSpec {
                    groups: 15,
                    train_per_group: 20,
                    test_per_group: 5,
                    intercept_mean: 2.0,
                    intercept_sd: 1.0,
                    slope_mean: -0.5,
                    slope_sd: 0.7,
                    noise_sd: 0.8,
                    covariate_range: (-3.0, 3.0),
                }),
            ),
            "soccer" => {
                return Err(DatagenError::InvalidSpec("soccer is loaded from a results file, not generated".into()))
            }
            _ => return Err(DatagenError::UnknownDataset(name)),
        };
        Ok(Self { name, title: title.to_string(), seed, kind })
    }

    pub fn soccer(csv_path: impl Into<PathBuf>, split_matchday: u32) -> Self {
        Self {
            name: "soccer".into(),
            title: "Football Match Results".into(),
            seed: 0,
            kind: DatasetKind::Soccer(SoccerSpec { csv_path: csv_path.into(), split_matchday }),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            DatasetKind::Regression1d(_) => "regression_1d",
            DatasetKind::Hierarchical(_) => "hierarchical",
            DatasetKind::VaryingSlopes(_) => "varying_slopes",
            DatasetKind::Soccer(_) => "soccer",
        }
    }

    /// Sampler settings the dataset is meant to be scored with.
    pub fn recommended_sampler(&self) -> SamplerConfig {
        let mut cfg = SamplerConfig::default();
        if self.name == "regression_1d_large" {
            cfg.sampling_draws = SamplerConfig::LARGE_REGRESSION_DRAWS;
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::InvalidSpec(m));
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        match &self.kind {
            DatasetKind::Regression1d(r) => {
                if r.n_train == 0 || r.n_test == 0 {
                    return bad(format!("counts must be positive (n_train={}, n_test={})", r.n_train, r.n_test));
                }
                if !(0.0..1.0).contains(&r.contamination_rate) {
                    return bad(format!("contamination rate {} not in [0, 1)", r.contamination_rate));
                }
                let (lo, hi) = r.contamination_magnitude;
                if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                    return bad(format!("contamination magnitude range [{lo}, {hi}] is invalid"));
                }
                if !range_ok(r.predictor_range) {
                    return bad(format!("predictor range {:?} is invalid", r.predictor_range));
                }
                r.process.validate().map_err(DatagenError::InvalidSpec)
            }
            DatasetKind::Hierarchical(h) => {
                if h.groups == 0 || h.train_per_group == 0 || h.test_per_group == 0 {
                    return bad("group count and per-group counts must be positive".into());
                }
                if !(h.effect_mean.is_finite() && h.effect_sd >= 0.0 && h.effect_sd.is_finite())
                    || !(h.noise_sd > 0.0 && h.noise_sd.is_finite())
                {
                    return bad("effect sd must be >= 0 and noise sd > 0, all finite".into());
                }
                Ok(())
            }
            DatasetKind::VaryingSlopes(s) => {
                if s.groups == 0 || s.train_per_group == 0 || s.test_per_group == 0 {
                    return bad("group count and per-group counts must be positive".into());
                }
                let finite = [s.intercept_mean, s.intercept_sd, s.slope_mean, s.slope_sd, s.noise_sd];
                if finite.iter().any(|v| !v.is_finite()) || s.intercept_sd < 0.0 || s.slope_sd < 0.0 || s.noise_sd <= 0.0 {
                    return bad("scales must be finite, sds >= 0 and noise sd > 0".into());
                }
                if !range_ok(s.covariate_range) {
                    return bad(format!("covariate range {:?} is invalid", s.covariate_range));
                }
                Ok(())
            }
            DatasetKind::Soccer(s) => {
                if !(1..SOCCER_MATCHDAYS).contains(&s.split_matchday) {
                    return bad(format!(
                        "split matchday {} not in [1, {SOCCER_MATCHDAYS}); both splits must be non-empty",
                        s.split_matchday
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Builds the dataset described by `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<GeneratedDataset, DatagenError> {
    match &spec.kind {
        DatasetKind::Regression1d(_) => gen_regression_1d(spec),
        DatasetKind::Hierarchical(_) => gen_hierarchical(spec),
        DatasetKind::VaryingSlopes(_) => gen_varying_slopes(spec),
        DatasetKind::Soccer(_) => load_soccer(spec),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Int,
    Real,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Int(Vec<i64>),
    Real(Vec<f64>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Int(v) => v.len(),
            Column::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column_type(&self) -> ColumnType {
        match self {
            Column::Int(_) => ColumnType::Int,
            Column::Real(_) => ColumnType::Real,
        }
    }

    fn field(&self, row: usize) -> String {
        match self {
            Column::Int(v) => v[row].to_string(),
            Column::Real(v) => crate::fmt::float(v[row]),
        }
    }

    fn stan_value(&self) -> StanValue {
        match self {
            Column::Int(v) => StanValue::IntArray(v.clone()),
            Column::Real(v) => StanValue::Vector(v.clone()),
        }
    }
}

/// Named, typed columns of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    names: Vec<String>,
    columns: Vec<Column>,
}

impl Table {
    pub fn new(columns: Vec<(&str, Column)>) -> Self {
        let len = columns.first().map_or(0, |(_, c)| c.len());
        assert!(columns.iter().all(|(_, c)| c.len() == len), "table columns differ in length");
        let (names, columns) = columns.into_iter().map(|(n, c)| (n.to_string(), c)).unzip();
        Self { names, columns }
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Column::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.names.iter().position(|n| n == name).map(|i| &self.columns[i])
    }

    pub fn real(&self, name: &str) -> Option<&[f64]> {
        match self.column(name)? {
            Column::Real(v) => Some(v),
            Column::Int(_) => None,
        }
    }

    pub fn int(&self, name: &str) -> Option<&[i64]> {
        match self.column(name)? {
            Column::Int(v) => Some(v),
            Column::Real(_) => None,
        }
    }

    pub fn schema(&self) -> Vec<(String, ColumnType)> {
        self.names.iter().cloned().zip(self.columns.iter().map(Column::column_type)).collect()
    }

    /// CSV text: header line, then one line per row, `\n` endings, reals at
    /// 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = self.names.join(",");
        out.push('\n');
        for r in 0..self.rows() {
            let fields: Vec<String> = self.columns.iter().map(|c| c.field(r)).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses CSV text written by [`Table::to_csv`] against `schema`.
    /// `path` only labels errors; rows are numbered from 1 after the header.
    pub fn from_csv(text: &str, schema: &[(String, ColumnType)], path: &str) -> Result<Self, DatagenError> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| DatagenError::Parse { path: path.into(), row: 0, message: e.to_string() })?
            .clone();
        let positions = schema
            .iter()
            .map(|(name, _)| {
                header.iter().position(|h| h == name).ok_or_else(|| DatagenError::Parse {
                    path: path.into(),
                    row: 0,
                    message: format!("missing column {name:?}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut columns: Vec<Column> = schema
            .iter()
            .map(|(_, t)| match t {
                ColumnType::Int => Column::Int(Vec::new()),
                ColumnType::Real => Column::Real(Vec::new()),
            })
            .collect();
        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let record =
                record.map_err(|e| DatagenError::Parse { path: path.into(), row, message: e.to_string() })?;
            for (col, &pos) in columns.iter_mut().zip(&positions) {
                let field = record.get(pos).unwrap_or("").trim();
                let err = |what: &str| DatagenError::Parse {
                    path: path.into(),
                    row,
                    message: format!("{} is not {what}: {field:?}", header.get(pos).unwrap_or("?")),
                };
                match col {
                    Column::Int(v) => v.push(field.parse().map_err(|_| err("an integer"))?),
                    Column::Real(v) => v.push(crate::fmt::parse_float(field).ok_or_else(|| err("a number"))?),
                }
            }
        }
        let names = schema.iter().map(|(n, _)| n.clone()).collect();
        Ok(Self { names, columns })
    }
}

/// True parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrueParameters {
    Regression1d { process: OracleRegressionParams },
    Hierarchical { group_means: Vec<f64>, noise_sd: f64 },
    VaryingSlopes { intercepts: Vec<f64>, slopes: Vec<f64>, noise_sd: f64 },
    None,
}

/// Hidden facts about a dataset. Lives in `protected/` and is only read by
/// the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleMetadata {
    pub spec: DatasetSpec,
    pub schema: Vec<(String, ColumnType)>,
    /// Column the models predict.
    pub target: String,
    pub oracle_nlpd: Option<f64>,
    pub definition: String,
    /// Mean and sd of the oracle's Gaussian predictive at each test row.
    pub test_mean: Vec<f64>,
    pub test_sd: Vec<f64>,
    /// Other oracle definitions, by name.
    pub alternatives: BTreeMap<String, f64>,
    /// Zero-based training rows that were shifted.
    pub contaminated_rows: Vec<usize>,
    pub true_parameters: TrueParameters,
}

impl OracleMetadata {
    /// Recomputes the oracle NLPD from the stored predictive and the test
    /// targets.
    pub fn recompute(&self, test: &Table) -> Result<f64, DatagenError> {
        if self.oracle_nlpd.is_none() {
            return Err(DatagenError::NoOracle);
        }
        let y = test
            .real(&self.target)
            .ok_or_else(|| DatagenError::InvalidSpec(format!("test table has no real column {:?}", self.target)))?;
        crate::scoring::oracle_nlpd_gaussian(y, &self.test_mean, &self.test_sd)
            .map_err(|e| DatagenError::InvalidSpec(e.to_string()))
    }
}

/// Train/test split with its hidden metadata and descriptor text.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub train: Table,
    pub test: Table,
    pub oracle: OracleMetadata,
    pub descriptor: String,
    /// Extra public files written next to `train.csv`, as (name, contents).
    pub extra_files: Vec<(String, String)>,
}

impl GeneratedDataset {
    pub fn spec(&self) -> &DatasetSpec {
        &self.oracle.spec
    }

    pub fn name(&self) -> &str {
        &self.oracle.spec.name
    }

    /// Data passed to the model: `N_train`, `N_test`, `<column>_train` and
    /// `<column>_test` for every column, plus `J` or `N_teams` for grouped
    /// kinds.
    pub fn stan_data(&self) -> StanData {
        let mut data = StanData::new();
        data.insert("N_train", StanValue::Int(self.train.rows() as i64));
        data.insert("N_test", StanValue::Int(self.test.rows() as i64));
        for (table, suffix) in [(&self.train, "train"), (&self.test, "test")] {
            for (name, col) in table.names.iter().zip(&table.columns) {
                data.insert(format!("{name}_{suffix}"), col.stan_value());
            }
        }
        match &self.oracle.spec.kind {
            DatasetKind::Hierarchical(h) => {
                data.insert("J", StanValue::Int(h.groups as i64));
            }
            DatasetKind::VaryingSlopes(s) => {
                data.insert("J", StanValue::Int(s.groups as i64));
            }
            DatasetKind::Soccer(_) => {
                data.insert("N_teams", StanValue::Int(SOCCER_TEAMS as i64));
            }
            DatasetKind::Regression1d(_) => {}
        }
        data
    }
}
