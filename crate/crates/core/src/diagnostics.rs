//! Convergence and sampling-health diagnostics for multi-chain draws.
//!
//! Split R-hat and ESS follow the classic (not rank-normalized) definitions:
//!
//! - split R-hat: every chain is cut into two halves of `n = D/2` draws
//!   (a middle draw is dropped when `D` is odd). With `W` the mean
//!   within-half variance and `B` the between-half variance of the half means
//!   scaled by `n`, `R = sqrt(((n-1)/n * W + B/n) / W)`.
//! - ESS: `M*D / (1 + 2 * sum_t rho_t)` where `rho_t` is the chain-averaged
//!   autocorrelation `1 - (W - mean_m acov_m(t)) / var_plus`. The sum stops at
//!   the first lag `t` with `rho_t + rho_{t+1} < 0`. The result is clipped to
//!   `[1, M*D]`.
//!
//! Zero-variance inputs do not produce NaN: R-hat is 1 and ESS is 1, both with
//! the `degenerate` flag set.

use std::collections::BTreeMap;

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("no chains")]
    NoChains,
    #[error("chain {chain} has {found} draws, chain 0 has {expected}")]
    UnequalDraws { chain: usize, expected: usize, found: usize },
    #[error("chain {chain} has {found} parameter columns, expected {expected}")]
    ColumnCount { chain: usize, expected: usize, found: usize },
    #[error("chain {chain} has {found} divergence flags for {expected} draws")]
    DivergentLength { chain: usize, expected: usize, found: usize },
    #[error("chain {chain} row {row} has {found} values, expected {expected}")]
    RaggedRow { chain: usize, row: usize, expected: usize, found: usize },
    #[error("chains have no draws")]
    NoDraws,
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("split R-hat and ESS need at least 4 draws per chain, got {0}")]
    TooFewDraws(usize),
}

/// One chain: `D` draws of `P` parameters stored column-wise, plus the
/// sampler's per-draw divergence flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTable<T> {
    columns: Vec<Vec<T>>,
    divergent: Vec<bool>,
}

impl<T: Real> ChainTable<T> {
    pub fn from_columns(columns: Vec<Vec<T>>, divergent: Vec<bool>) -> Self {
        Self { columns, divergent }
    }

    pub fn from_rows(rows: &[Vec<T>], divergent: Vec<bool>) -> Result<Self, DiagnosticsError> {
        let width = rows.first().map_or(0, Vec::len);
        let mut columns = vec![Vec::with_capacity(rows.len()); width];
        for (row, values) in rows.iter().enumerate() {
            if values.len() != width {
                return Err(DiagnosticsError::RaggedRow { chain: 0, row, expected: width, found: values.len() });
            }
            for (col, &v) in columns.iter_mut().zip(values) {
                col.push(v);
            }
        }
        Ok(Self { columns, divergent })
    }

    pub fn draws(&self) -> usize {
        self.divergent.len()
    }

    pub fn column(&self, index: usize) -> &[T] {
        &self.columns[index]
    }

    pub fn divergent(&self) -> &[bool] {
        &self.divergent
    }
}

/// Multi-chain posterior draws with named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws<T> {
    names: Vec<String>,
    chains: Vec<ChainTable<T>>,
}

impl<T: Real> ChainDraws<T> {
    pub fn new(names: Vec<String>, chains: Vec<ChainTable<T>>) -> Result<Self, DiagnosticsError> {
        let first = chains.first().ok_or(DiagnosticsError::NoChains)?;
        let draws = first.draws();
        if draws == 0 {
            return Err(DiagnosticsError::NoDraws);
        }
        for (i, chain) in chains.iter().enumerate() {
            if chain.columns.len() != names.len() {
                return Err(DiagnosticsError::ColumnCount { chain: i, expected: names.len(), found: chain.columns.len() });
            }
            if chain.draws() != draws {
                return Err(DiagnosticsError::UnequalDraws { chain: i, expected: draws, found: chain.draws() });
            }
            if let Some(col) = chain.columns.iter().find(|c| c.len() != draws) {
                return Err(DiagnosticsError::DivergentLength { chain: i, expected: col.len(), found: draws });
            }
        }
        Ok(Self { names, chains })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn chains(&self) -> &[ChainTable<T>] {
        &self.chains
    }

    pub fn num_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn draws_per_chain(&self) -> usize {
        self.chains[0].draws()
    }

    pub fn total_draws(&self) -> usize {
        self.num_chains() * self.draws_per_chain()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// The draws of one parameter, one slice per chain.
    pub fn param(&self, name: &str) -> Result<Vec<&[T]>, DiagnosticsError> {
        let idx = self
            .param_index(name)
            .ok_or_else(|| DiagnosticsError::UnknownParameter(name.to_string()))?;
        Ok(self.chains.iter().map(|c| c.column(idx)).collect())
    }
}

/// A diagnostic value plus whether it came from the zero-variance rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate<T> {
    pub value: T,
    pub degenerate: bool,
}

pub fn split_rhat<T: Real>(draws: &ChainDraws<T>, param: &str) -> Result<Estimate<T>, DiagnosticsError> {
    split_rhat_chains(&draws.param(param)?)
}

pub fn ess<T: Real>(draws: &ChainDraws<T>, param: &str) -> Result<Estimate<T>, DiagnosticsError> {
    ess_chains(&draws.param(param)?)
}

fn mean<T: Real>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |a, &x| a + x) / T::from_count(xs.len())
}

/// Sample variance with an `n - 1` denominator.
fn variance<T: Real>(xs: &[T], mean: T) -> T {
    let ss = xs.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean));
    ss / T::from_count(xs.len() - 1)
}

fn check_draws<T>(chains: &[&[T]]) -> Result<usize, DiagnosticsError> {
    let d = chains.first().ok_or(DiagnosticsError::NoChains)?.len();
    if d < 4 {
        return Err(DiagnosticsError::TooFewDraws(d));
    }
    if let Some((chain, c)) = chains.iter().enumerate().find(|(_, c)| c.len() != d) {
        return Err(DiagnosticsError::UnequalDraws { chain, expected: d, found: c.len() });
    }
    Ok(d)
}

/// `(W, var_plus)` over equally long sequences.
fn variance_components<T: Real>(seqs: &[&[T]]) -> (T, T) {
    let n = T::from_count(seqs[0].len());
    let m = seqs.len();
    let means: Vec<T> = seqs.iter().map(|s| mean(s)).collect();
    let w = seqs.iter().zip(&means).fold(T::zero(), |a, (s, &mu)| a + variance(s, mu)) / T::from_count(m);
    let b = if m > 1 {
        let grand = mean(&means);
        let ss = means.iter().fold(T::zero(), |a, &mu| a + (mu - grand) * (mu - grand));
        n * ss / T::from_count(m - 1)
    } else {
        T::zero()
    };
    let var_plus = (n - T::one()) / n * w + b / n;
    (w, var_plus)
}

/// Split R-hat over raw per-chain slices.
pub fn split_rhat_chains<T: Real>(chains: &[&[T]]) -> Result<Estimate<T>, DiagnosticsError> {
    let d = check_draws(chains)?;
    let half = d / 2;
    let halves: Vec<&[T]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[d - half..]])
        .collect();
    let (w, var_plus) = variance_components(&halves);
    if w == T::zero() {
        // Constant halves: identical constants mix perfectly; distinct ones
        // never will.
        let value = if var_plus == T::zero() { T::one() } else { T::infinity() };
        return Ok(Estimate { value, degenerate: true });
    }
    Ok(Estimate { value: (var_plus / w).sqrt(), degenerate: false })
}

/// Biased autocovariance of `xs` at every lag, via zero-padded FFT.
fn autocovariance(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let size = (2 * n).next_power_of_two();
    let mu = xs.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = xs
        .iter()
        .map(|&x| Complex::new(x - mu, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let scale = (size * n) as f64;
    buf[..n].iter().map(|c| c.re / scale).collect()
}

/// Autocorrelation-truncated ESS over raw per-chain slices.
pub fn ess_chains<T: Real>(chains: &[&[T]]) -> Result<Estimate<T>, DiagnosticsError> {
    let d = check_draws(chains)?;
    let m = chains.len();
    let total = (m * d) as f64;
    let (w, var_plus) = variance_components(chains);
    let (w, var_plus) = (w.to_f64().unwrap_or(0.0), var_plus.to_f64().unwrap_or(0.0));
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN counts as degenerate
    if !(var_plus > 0.0) {
        return Ok(Estimate { value: T::one(), degenerate: true });
    }
    let acovs: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| autocovariance(&c.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect::<Vec<_>>()))
        .collect();
    let rho = |t: usize| {
        let mean_acov = acovs.iter().map(|a| a[t]).sum::<f64>() / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut sum = 0.0;
    let mut t = 1;
    while t + 1 < d {
        let (r0, r1) = (rho(t), rho(t + 1));
        if r0 + r1 < 0.0 {
            break;
        }
        sum += r0;
        t += 1;
    }
    let tau = 1.0 + 2.0 * sum;
    let value = (total / tau).clamp(1.0, total);
    Ok(Estimate { value: T::lit(value), degenerate: false })
}

/// Total number of divergent transitions across chains.
pub fn divergence_count<T: Real>(draws: &ChainDraws<T>) -> usize {
    draws
        .chains
        .iter()
        .map(|c| c.divergent.iter().filter(|&&d| d).count())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Health {
    Ok,
    Warn,
    Fail,
}

impl std::fmt::Display for Health {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Health::Ok => "ok",
            Health::Warn => "warn",
            Health::Fail => "fail",
        })
    }
}

/// Cut-offs for [`Health`]. Any divergence warns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HealthThresholds<T> {
    pub rhat_warn: T,
    pub rhat_fail: T,
    /// Divergent fraction of all draws above which the fit fails.
    pub divergence_fail_fraction: T,
}

impl<T: Real> Default for HealthThresholds<T> {
    fn default() -> Self {
        Self {
            rhat_warn: T::lit(1.01),
            rhat_fail: T::lit(1.05),
            divergence_fail_fraction: T::lit(0.005),
        }
    }
}

impl<T: Real> HealthThresholds<T> {
    pub fn classify(&self, max_rhat: T, divergences: usize, total_draws: usize) -> Health {
        let frac = T::from_count(divergences) / T::from_count(total_draws.max(1));
        if max_rhat > self.rhat_fail || frac > self.divergence_fail_fraction {
            Health::Fail
        } else if max_rhat > self.rhat_warn || divergences > 0 {
            Health::Warn
        } else {
            Health::Ok
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostics<T> {
    pub rhat: T,
    pub ess: T,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport<T> {
    pub max_rhat: T,
    pub min_ess: T,
    pub divergences: usize,
    pub total_draws: usize,
    pub per_param: BTreeMap<String, ParamDiagnostics<T>>,
    pub health: Health,
}

/// Whether a column is sampler bookkeeping or evaluation output rather than
/// a model parameter.
pub fn is_internal_column(name: &str) -> bool {
    name.ends_with("__") || name == "log_lik" || name.starts_with("log_lik.")
}

pub fn summarize<T: Real>(
    draws: &ChainDraws<T>,
    thresholds: &HealthThresholds<T>,
) -> Result<DiagnosticsReport<T>, DiagnosticsError> {
    let params: Vec<&String> = draws.names.iter().filter(|n| !is_internal_column(n)).collect();
    let computed: Result<Vec<(String, ParamDiagnostics<T>)>, DiagnosticsError> = params
        .par_iter()
        .map(|name| {
            let chains = draws.param(name)?;
            let rhat = split_rhat_chains(&chains)?;
            let ess = ess_chains(&chains)?;
            let diag = ParamDiagnostics {
                rhat: rhat.value,
                ess: ess.value,
                degenerate: rhat.degenerate || ess.degenerate,
            };
            Ok(((*name).clone(), diag))
        })
        .collect();
    let per_param: BTreeMap<_, _> = computed?.into_iter().collect();
    let total = draws.total_draws();
    let max_rhat = per_param.values().map(|p| p.rhat).fold(None, |acc: Option<T>, r| {
        Some(acc.map_or(r, |a| a.max(r)))
    });
    let min_ess = per_param.values().map(|p| p.ess).fold(None, |acc: Option<T>, e| {
        Some(acc.map_or(e, |a| a.min(e)))
    });
    let divergences = divergence_count(draws);
    let max_rhat = max_rhat.unwrap_or_else(T::one);
    Ok(DiagnosticsReport {
        max_rhat,
        min_ess: min_ess.unwrap_or_else(|| T::from_count(total)),
        divergences,
        total_draws: total,
        health: thresholds.classify(max_rhat, divergences, total),
        per_param,
    })
}
