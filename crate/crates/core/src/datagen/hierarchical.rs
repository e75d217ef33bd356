use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha20Rng;

use super::{
    emit::describe, stream, streams, Column, DatagenError, DatasetKind, DatasetSpec, GeneratedDataset,
    OracleMetadata, Table, TrueParameters,
};
use crate::scoring::oracle_nlpd_gaussian;

/// Name of the alternative hierarchical oracle in [`OracleMetadata::alternatives`].
pub const POSTERIOR_PREDICTIVE_ORACLE: &str = "posterior_predictive_known_hyperparameters";

fn normal(rng: &mut ChaCha20Rng, mean: f64, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + sd * z
}

fn oracle_value(y: &[f64], mean: &[f64], sd: &[f64]) -> Result<f64, DatagenError> {
    oracle_nlpd_gaussian(y, mean, sd).map_err(|e| DatagenError::InvalidSpec(e.to_string()))
}

/// Group means from `N(effect_mean, effect_sd)`, observations `N(mu_j, noise_sd)`.
///
/// Rows are grouped by unit; within a unit the first `train_per_group` draws
/// go to training. The default oracle knows every `mu_j`. The alternative
/// conditions on the training rows with the hyperparameters known.
pub fn gen_hierarchical(spec: &DatasetSpec) -> Result<GeneratedDataset, DatagenError> {
    spec.validate()?;
    let DatasetKind::Hierarchical(h) = &spec.kind else {
        return Err(DatagenError::InvalidSpec(format!("{} is not a hierarchical spec", spec.name)));
    };
    let mut effects = stream(spec.seed, streams::GROUP_EFFECT);
    let mu: Vec<f64> = (0..h.groups).map(|_| normal(&mut effects, h.effect_mean, h.effect_sd)).collect();
    let mut noise = stream(spec.seed, streams::NOISE);

    let (mut unit_train, mut y_train, mut unit_test, mut y_test) = (vec![], vec![], vec![], vec![]);
    let (mut test_mean, mut post_mean, mut post_sd) = (vec![], vec![], vec![]);
    let sigma2 = h.noise_sd * h.noise_sd;
    for (j, &m) in mu.iter().enumerate() {
        let unit = j as i64 + 1;
        let ys: Vec<f64> = (0..h.train_per_group).map(|_| normal(&mut noise, m, h.noise_sd)).collect();
        let (pm, pv) = if h.effect_sd == 0.0 {
            (h.effect_mean, 0.0)
        } else {
            let precision = 1.0 / (h.effect_sd * h.effect_sd) + ys.len() as f64 / sigma2;
            let pv = 1.0 / precision;
            (pv * (h.effect_mean / (h.effect_sd * h.effect_sd) + ys.iter().sum::<f64>() / sigma2), pv)
        };
        unit_train.extend(std::iter::repeat_n(unit, ys.len()));
        y_train.extend(ys);
        for _ in 0..h.test_per_group {
            unit_test.push(unit);
            y_test.push(normal(&mut noise, m, h.noise_sd));
            test_mean.push(m);
            post_mean.push(pm);
            post_sd.push((sigma2 + pv).sqrt());
        }
    }
    let test_sd = vec![h.noise_sd; y_test.len()];
    let oracle_nlpd = oracle_value(&y_test, &test_mean, &test_sd)?;
    let alternative = oracle_value(&y_test, &post_mean, &post_sd)?;

    let train = Table::new(vec![("unit", Column::Int(unit_train)), ("effect", Column::Real(y_train))]);
    let test = Table::new(vec![("unit", Column::Int(unit_test)), ("effect", Column::Real(y_test))]);
    let oracle = OracleMetadata {
        spec: spec.clone(),
        schema: train.schema(),
        target: "effect".into(),
        oracle_nlpd: Some(oracle_nlpd),
        definition: "Gaussian around the true group mean with the true noise scale".into(),
        test_mean,
        test_sd,
        alternatives: BTreeMap::from([(POSTERIOR_PREDICTIVE_ORACLE.to_string(), alternative)]),
        contaminated_rows: Vec::new(),
        true_parameters: TrueParameters::Hierarchical { group_means: mu, noise_sd: h.noise_sd },
    };
    let descriptor = describe(spec, &train, &test);
    Ok(GeneratedDataset { train, test, oracle, descriptor, extra_files: Vec::new() })
}

/// Per-group lines `y = alpha_j + beta_j x + N(0, noise_sd)` with
/// `alpha_j`, `beta_j` Gaussian across groups and `x` uniform.
pub fn gen_varying_slopes(spec: &DatasetSpec) -> Result<GeneratedDataset, DatagenError> {
    spec.validate()?;
    let DatasetKind::VaryingSlopes(s) = &spec.kind else {
        return Err(DatagenError::InvalidSpec(format!("{} is not a varying-slopes spec", spec.name)));
    };
    let mut a_rng = stream(spec.seed, streams::GROUP_EFFECT);
    let mut b_rng = stream(spec.seed, streams::GROUP_SLOPE);
    let alpha: Vec<f64> = (0..s.groups).map(|_| normal(&mut a_rng, s.intercept_mean, s.intercept_sd)).collect();
    let beta: Vec<f64> = (0..s.groups).map(|_| normal(&mut b_rng, s.slope_mean, s.slope_sd)).collect();
    let mut xs = stream(spec.seed, streams::PREDICTOR);
    let mut noise = stream(spec.seed, streams::NOISE);
    let (lo, hi) = s.covariate_range;

    let mut train = (vec![], vec![], vec![]);
    let mut test = (vec![], vec![], vec![]);
    let mut test_mean = vec![];
    for j in 0..s.groups {
        let unit = j as i64 + 1;
        for i in 0..s.train_per_group + s.test_per_group {
            let x = xs.random_range(lo..hi);
            let mean = alpha[j] + beta[j] * x;
            let y = normal(&mut noise, mean, s.noise_sd);
            let dest = if i < s.train_per_group { &mut train } else { &mut test };
            dest.0.push(unit);
            dest.1.push(x);
            dest.2.push(y);
            if i >= s.train_per_group {
                test_mean.push(mean);
            }
        }
    }
    let test_sd = vec![s.noise_sd; test.2.len()];
    let oracle_nlpd = oracle_value(&test.2, &test_mean, &test_sd)?;
    let table = |(u, x, y): (Vec<i64>, Vec<f64>, Vec<f64>)| {
        Table::new(vec![("unit", Column::Int(u)), ("covariate", Column::Real(x)), ("outcome", Column::Real(y))])
    };
    let (train, test) = (table(train), table(test));
    let oracle = OracleMetadata {
        spec: spec.clone(),
        schema: train.schema(),
        target: "outcome".into(),
        oracle_nlpd: Some(oracle_nlpd),
        definition: "Gaussian around the true group line with the true noise scale".into(),
        test_mean,
        test_sd,
        alternatives: BTreeMap::new(),
        contaminated_rows: Vec::new(),
        true_parameters: TrueParameters::VaryingSlopes { intercepts: alpha, slopes: beta, noise_sd: s.noise_sd },
    };
    let descriptor = describe(spec, &train, &test);
    Ok(GeneratedDataset { train, test, oracle, descriptor, extra_files: Vec::new() })
}
