use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    emit::describe, stream, streams, Column, DatagenError, DatasetKind, DatasetSpec, GeneratedDataset,
    OracleMetadata, Table, TrueParameters,
};
use crate::scoring::oracle_nlpd_gaussian;

/// 1D regression with heteroscedastic noise and shifted training outliers.
///
/// Exactly `round(rate * n_train)` training rows get a shift of uniform
/// magnitude in the configured range and random sign. Test rows are clean.
pub fn gen_regression_1d(spec: &DatasetSpec) -> Result<GeneratedDataset, DatagenError> {
    spec.validate()?;
    let DatasetKind::Regression1d(r) = &spec.kind else {
        return Err(DatagenError::InvalidSpec(format!("{} is not a regression spec", spec.name)));
    };
    let n = r.n_train + r.n_test;
    let (lo, hi) = r.predictor_range;
    let mut xs = stream(spec.seed, streams::PREDICTOR);
    let x: Vec<f64> = (0..n).map(|_| xs.random_range(lo..hi)).collect();
    let mut noise = stream(spec.seed, streams::NOISE);
    let mut y: Vec<f64> = x
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(&mut noise);
            r.process.mean(x) + r.process.sigma(x) * e
        })
        .collect();

    let k = (r.contamination_rate * r.n_train as f64).round() as usize;
    let mut rows = index::sample(&mut stream(spec.seed, streams::CONTAMINATION_ROWS), r.n_train, k).into_vec();
    rows.sort_unstable();
    let mut mags = stream(spec.seed, streams::CONTAMINATION_MAGNITUDE);
    let mut signs = stream(spec.seed, streams::CONTAMINATION_SIGN);
    let (mlo, mhi) = r.contamination_magnitude;
    for &row in &rows {
        let magnitude = if mlo == mhi { mlo } else { mags.random_range(mlo..=mhi) };
        let sign = if signs.random_bool(0.5) { 1.0 } else { -1.0 };
        y[row] += sign * magnitude;
    }

    let (x_train, x_test) = x.split_at(r.n_train);
    let (y_train, y_test) = y.split_at(r.n_train);
    let train = Table::new(vec![("predictor", Column::Real(x_train.to_vec())), ("response", Column::Real(y_train.to_vec()))]);
    let test = Table::new(vec![("predictor", Column::Real(x_test.to_vec())), ("response", Column::Real(y_test.to_vec()))]);

    let test_mean: Vec<f64> = x_test.iter().map(|&x| r.process.mean(x)).collect();
    let test_sd: Vec<f64> = x_test.iter().map(|&x| r.process.sigma(x)).collect();
    let oracle_nlpd =
        oracle_nlpd_gaussian(y_test, &test_mean, &test_sd).map_err(|e| DatagenError::InvalidSpec(e.to_string()))?;
    let oracle = OracleMetadata {
        spec: spec.clone(),
        schema: train.schema(),
        target: "response".into(),
        oracle_nlpd: Some(oracle_nlpd),
        definition: "Gaussian with the true mean and noise scale at each test predictor".into(),
        test_mean,
        test_sd,
        alternatives: BTreeMap::new(),
        contaminated_rows: rows,
        true_parameters: TrueParameters::Regression1d { process: r.process },
    };
    let descriptor = describe(spec, &train, &test);
    Ok(GeneratedDataset { train, test, oracle, descriptor, extra_files: Vec::new() })
}
