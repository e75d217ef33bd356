//! Recorded model-search runs: the NLPD of every iteration and whether it was
//! kept. These drive replay evaluation and the decision-rule golden tests.
//!
//! Values are as published, to four decimals. Where a rounded value ties the
//! best so far but was kept, the stored value sits 5e-5 below the tie so the
//! strict rule reproduces the decision (see the slopes run).

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    Baseline,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordedStep {
    pub iteration: usize,
    pub nlpd: f64,
    pub marker: Marker,
    pub change: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordedTrajectory {
    pub name: &'static str,
    /// Dataset preset the run was made on.
    pub dataset: &'static str,
    pub oracle_nlpd: Option<f64>,
    pub steps: &'static [RecordedStep],
}

impl RecordedTrajectory {
    pub fn nlpds(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.nlpd).collect()
    }

    /// Keep/revert decisions (every step after the baseline).
    pub fn decisions(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn best(&self) -> &RecordedStep {
        self.steps
            .iter()
            .filter(|s| s.marker != Marker::Rejected)
            .min_by(|a, b| a.nlpd.total_cmp(&b.nlpd))
            .expect("trajectory has a baseline")
    }
}

const fn step(iteration: usize, nlpd: f64, marker: Marker, change: &'static str) -> RecordedStep {
    RecordedStep { iteration, nlpd, marker, change }
}

use Marker::{Accepted as A, Baseline as B, Rejected as R};

pub const REGRESSION_LARGE: RecordedTrajectory = RecordedTrajectory {
    name: "regression-large",
    dataset: "regression_1d_large",
    oracle_nlpd: Some(1.1442),
    steps: &[
        step(0, 2.1589, B, "linear mean, Gaussian noise"),
        step(1, 1.3181, A, "cubic mean, Student-t noise"),
        step(2, 1.3060, A, "sine basis mean, Student-t noise"),
        step(3, 1.3088, R, "two-harmonic Fourier mean"),
        step(4, 1.2952, A, "linear log sigma"),
        step(5, 1.2854, A, "quadratic log sigma"),
        step(6, 1.2859, R, "sine plus quadratic mean"),
        step(7, 1.2844, A, "learnable frequency"),
        step(8, 1.2635, A, "two-component mixture, outlier scale estimated"),
        step(9, 1.2325, A, "mixture with outlier scale fixed at 10"),
        step(10, 1.3529, R, "outlier scale estimated again, chains disagree"),
        step(11, 1.2256, A, "cubic log sigma in the fixed-scale mixture"),
        step(12, 1.2262, R, "sine log sigma"),
        step(13, 1.2258, R, "cubic log sigma with periodic term"),
        step(14, 1.2291, R, "Student-t inlier component"),
    ],
};

pub const REGRESSION_SMALL: RecordedTrajectory = RecordedTrajectory {
    name: "regression-small",
    dataset: "regression_1d_small",
    oracle_nlpd: Some(0.9443),
    steps: &[
        step(0, 2.2482, B, "linear mean, Gaussian noise"),
        step(1, 1.5023, A, "quadratic mean, Student-t noise"),
        step(2, 1.1558, A, "cubic mean, log-linear sigma, Student-t noise"),
        step(3, 1.2247, R, "Fourier mean"),
        step(4, 1.2319, R, "quartic mean, quadratic log sigma"),
        step(5, 1.1244, A, "contamination mixture, log-linear sigma"),
        step(6, 1.1520, R, "Student-t clean component"),
        step(7, 1.2131, R, "mixture with cubic plus sine mean"),
        step(8, 1.2592, R, "mixture with quartic mean"),
    ],
};

pub const HIERARCHICAL_SMALL: RecordedTrajectory = RecordedTrajectory {
    name: "hier-small",
    dataset: "hierarchical_small",
    oracle_nlpd: Some(1.4935),
    steps: &[
        step(0, 1.4999, B, "centered partial pooling"),
        step(1, 1.5014, R, "non-centered group means"),
        step(2, 1.5035, R, "Student-t noise"),
        step(3, 1.5019, R, "group-specific sigma"),
    ],
};

pub const HIERARCHICAL_LARGE: RecordedTrajectory = RecordedTrajectory {
    name: "hier-large",
    dataset: "hierarchical_large",
    oracle_nlpd: Some(1.4039),
    steps: &[
        step(0, 1.4036, B, "centered partial pooling, shared sigma"),
        step(1, 1.4035, A, "non-centered group means"),
        step(2, 1.4025, A, "group-specific sigma"),
        step(3, 1.4018, A, "Student-t noise, estimated degrees of freedom"),
        step(4, 1.4014, A, "tighter priors"),
        step(5, 1.4020, R, "fixed degrees of freedom"),
        step(6, 1.4015, R, "heavier prior on degrees of freedom"),
        step(7, 1.4034, R, "Gaussian noise ablation"),
    ],
};

pub const VARYING_SLOPES: RecordedTrajectory = RecordedTrajectory {
    name: "slopes",
    dataset: "varying_slopes",
    oracle_nlpd: Some(1.2627),
    steps: &[
        step(0, 1.8178, B, "fully pooled line"),
        step(1, 1.3091, A, "varying intercepts and slopes, non-centered"),
        step(2, 1.3073, A, "correlated intercepts and slopes"),
        // published as 1.3073 (a tie at four decimals) and kept
        step(3, 1.30725, A, "Student-t noise"),
        step(4, 1.3055, A, "unit-specific sigma"),
        step(5, 1.2910, A, "quadratic term per unit"),
        step(6, 1.2933, R, "independent group terms"),
        step(7, 1.2839, A, "three correlated group terms"),
        step(8, 1.2861, R, "tighter prior on the quadratic scale"),
        step(9, 1.2890, R, "stronger correlation prior"),
        step(10, 1.2738, A, "piecewise line with a knot at zero"),
        step(11, 1.2833, R, "two knots"),
        step(12, 1.2949, R, "piecewise line with covariate-dependent sigma"),
        step(13, 1.2937, R, "learned knot"),
    ],
};

pub const SOCCER: RecordedTrajectory = RecordedTrajectory {
    name: "soccer",
    dataset: "soccer",
    oracle_nlpd: None,
    steps: &[
        step(0, 1.5663, B, "Poisson, independent team priors"),
        step(1, 1.5465, A, "hierarchical attack and defense"),
        step(2, 1.5557, R, "negative binomial"),
        step(3, 1.5463, A, "non-centered attack and defense"),
        step(4, 1.5472, R, "low-score correction"),
        step(5, 1.5468, R, "correlated attack and defense"),
        step(6, 1.5460, A, "tighter scale priors"),
        step(7, 1.5544, R, "negative binomial for home goals"),
        step(8, 1.5645, R, "one strength per team"),
        step(9, 1.5432, A, "team-specific home advantage"),
        step(10, 1.5443, R, "symmetric home advantage"),
        step(11, 1.5432, R, "separate attack and defense home advantage"),
        step(12, 1.5460, R, "zero-inflated Poisson"),
    ],
};

pub const ALL: [&RecordedTrajectory; 6] =
    [&REGRESSION_LARGE, &REGRESSION_SMALL, &HIERARCHICAL_SMALL, &HIERARCHICAL_LARGE, &VARYING_SLOPES, &SOCCER];

pub fn by_name(name: &str) -> Option<&'static RecordedTrajectory> {
    let name = name.trim().to_ascii_lowercase().replace('_', "-");
    ALL.into_iter().find(|t| t.name == name)
}
