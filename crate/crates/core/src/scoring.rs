//! Held-out predictive scores.
//!
//! Everything here works on a [`LogLikMatrix`]: `S` posterior draws by `N`
//! test points of `log p(y_n | theta_s)` in nats. The NLPD is
//!
//! ```text
//! NLPD = -(1/N) * sum_n [ logsumexp_s(values[s, n]) - log S ]
//! ```
//!
//! Entries may be `-inf` (a draw that gives a test point zero density). A
//! column that is `-inf` under every draw makes the score `+inf`; that case is
//! logged as a warning and reported through [`NlpdBreakdown`].

use std::io::{Read, Write};

use thiserror::Error;

use crate::Real;

/// Default half-width for [`nlpd_from_cdf`].
pub const DEFAULT_CDF_DELTA: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("log-likelihood matrix is empty ({draws} draws x {points} points)")]
    Empty { draws: usize, points: usize },
    #[error("log-likelihood matrix has {len} values, expected {draws} x {points}")]
    Shape { draws: usize, points: usize, len: usize },
    #[error("log-likelihood row {row} has {found} values, expected {expected}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("NaN log-likelihood at draw {draw}, point {point}")]
    NaN { draw: usize, point: usize },
    #[error("+inf log-likelihood at draw {draw}, point {point}")]
    PositiveInfinity { draw: usize, point: usize },
    #[error("length mismatch: y has {y}, mu has {mu}, sigma has {sigma}")]
    LengthMismatch { y: usize, mu: usize, sigma: usize },
    #[error("sigma must be positive and finite, got {value} at index {index}")]
    BadSigma { index: usize, value: f64 },
    #[error("finite-difference half-width must be positive, got {0}")]
    BadDelta(f64),
    #[error("finite-difference density at point {index} (y = {y}) is {density}; delta too small or CDF flat")]
    NonPositiveDensity { index: usize, y: f64, density: f64 },
    #[error("draws file: {0}")]
    DrawsFile(String),
}

/// Per-observation log predictive densities, `draws` rows by `points` columns.
///
/// Construction validates the invariants (non-empty, no NaN, no `+inf`), so
/// the scoring functions themselves are infallible.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikMatrix<T> {
    draws: usize,
    points: usize,
    // row-major: values[s * points + n]
    values: Vec<T>,
}

impl<T: Real> LogLikMatrix<T> {
    pub fn from_vec(draws: usize, points: usize, values: Vec<T>) -> Result<Self, ScoringError> {
        if draws == 0 || points == 0 {
            return Err(ScoringError::Empty { draws, points });
        }
        if values.len() != draws * points {
            return Err(ScoringError::Shape { draws, points, len: values.len() });
        }
        for (i, v) in values.iter().enumerate() {
            let (draw, point) = (i / points, i % points);
            if v.is_nan() {
                return Err(ScoringError::NaN { draw, point });
            }
            if v.is_infinite() && v.is_sign_positive() {
                return Err(ScoringError::PositiveInfinity { draw, point });
            }
        }
        Ok(Self { draws, points, values })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self, ScoringError> {
        let points = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * points);
        for (row, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != points {
                return Err(ScoringError::RaggedRow { row, expected: points, found: r.len() });
            }
            values.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), points, values)
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn get(&self, draw: usize, point: usize) -> T {
        self.values[draw * self.points + point]
    }

    pub fn row(&self, draw: usize) -> &[T] {
        &self.values[draw * self.points..(draw + 1) * self.points]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    /// Adds `c` to every entry.
    pub fn shifted(&self, c: T) -> Self {
        Self {
            draws: self.draws,
            points: self.points,
            values: self.values.iter().map(|&v| v + c).collect(),
        }
    }

    /// `log(mean(exp(column)))`. The shift is added last so a constant
    /// column comes back exactly.
    fn column_log_mean_exp(&self, point: usize) -> T {
        let column = (0..self.draws).map(|s| self.get(s, point));
        let max = column.clone().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            return max;
        }
        let sum = column.fold(T::zero(), |acc, v| acc + (v - max).exp());
        max + (sum.ln() - T::from_count(self.draws).ln())
    }
}

/// `log(sum(exp(x)))` with a max shift. Returns `-inf` for an empty input or
/// when every element is `-inf`.
pub fn logsumexp<T: Real, I>(values: I) -> T
where
    I: IntoIterator<Item = T>,
    I::IntoIter: Clone,
{
    let iter = values.into_iter();
    let max = iter.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let sum = iter.fold(T::zero(), |acc, v| acc + (v - max).exp());
    max + sum.ln()
}

/// NLPD together with the per-point terms and any columns with zero
/// predictive density under every draw.
#[derive(Debug, Clone, PartialEq)]
pub struct NlpdBreakdown<T> {
    pub nlpd: T,
    pub pointwise_lpd: Vec<T>,
    pub zero_density_points: Vec<usize>,
}

/// `logsumexp_s(values[s, n]) - log S` for every test point `n`.
pub fn pointwise_lpd<T: Real>(loglik: &LogLikMatrix<T>) -> Vec<T> {
    (0..loglik.points()).map(|n| loglik.column_log_mean_exp(n)).collect()
}

/// Held-out negative log predictive density in nats per test point.
pub fn nlpd<T: Real>(loglik: &LogLikMatrix<T>) -> T {
    nlpd_breakdown(loglik).nlpd
}

pub fn nlpd_breakdown<T: Real>(loglik: &LogLikMatrix<T>) -> NlpdBreakdown<T> {
    let lpd = pointwise_lpd(loglik);
    let zero_density_points: Vec<usize> = lpd
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == T::neg_infinity())
        .map(|(n, _)| n)
        .collect();
    if !zero_density_points.is_empty() {
        log::warn!(
            "{} test point(s) have zero predictive density under every draw (first: {}); NLPD is +inf",
            zero_density_points.len(),
            zero_density_points[0]
        );
    }
    let total = lpd.iter().fold(T::zero(), |acc, &v| acc + v);
    NlpdBreakdown {
        nlpd: -total / T::from_count(lpd.len()),
        pointwise_lpd: lpd,
        zero_density_points,
    }
}

/// Log density of `Normal(mu, sigma)` at `y`.
pub fn normal_lpdf<T: Real>(y: T, mu: T, sigma: T) -> T {
    let z = (y - mu) / sigma;
    -T::lit(0.5) * z * z - sigma.ln() - T::lit(0.5) * (T::lit(2.0) * T::PI()).ln()
}

/// Mean of `-log Normal(y_n; mu_n, sigma_n)`: the score of a predictive that
/// knows the true mean and noise at every test point.
pub fn oracle_nlpd_gaussian<T: Real>(y: &[T], mu: &[T], sigma: &[T]) -> Result<T, ScoringError> {
    if y.len() != mu.len() || y.len() != sigma.len() {
        return Err(ScoringError::LengthMismatch { y: y.len(), mu: mu.len(), sigma: sigma.len() });
    }
    if y.is_empty() {
        return Err(ScoringError::Empty { draws: 1, points: 0 });
    }
    let mut total = T::zero();
    for (index, ((&y, &mu), &sigma)) in y.iter().zip(mu).zip(sigma).enumerate() {
        if !(sigma > T::zero() && sigma.is_finite()) {
            return Err(ScoringError::BadSigma { index, value: sigma.to_f64().unwrap_or(f64::NAN) });
        }
        total = total - normal_lpdf(y, mu, sigma);
    }
    Ok(total / T::from_count(y.len()))
}

/// Mean function of the synthetic 1D regression: `2 sin(1.2 x) + 0.3 x`.
pub fn dgp_mean<T: Real>(x: T) -> T {
    T::lit(2.0) * (T::lit(1.2) * x).sin() + T::lit(0.3) * x
}

/// Noise scale of the synthetic 1D regression: a 0.3 floor plus a Gaussian
/// bump of height 0.8 centred at 3 with width 1.5.
pub fn dgp_sigma<T: Real>(x: T) -> T {
    let z = (x - T::lit(3.0)) / T::lit(1.5);
    T::lit(0.3) + T::lit(0.8) * (-T::lit(0.5) * z * z).exp()
}

/// Constants of the regression process, `a sin(w x) + b x` for the mean and
/// `s0 + h exp(-((x - c) / w)^2 / 2)` for the noise scale. The default is the
/// process behind [`dgp_mean`] and [`dgp_sigma`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OracleRegressionParams {
    pub amplitude: f64,
    pub frequency: f64,
    pub slope: f64,
    pub sigma_base: f64,
    pub bump_amplitude: f64,
    pub bump_center: f64,
    pub bump_width: f64,
}

impl Default for OracleRegressionParams {
    fn default() -> Self {
        Self {
            amplitude: 2.0,
            frequency: 1.2,
            slope: 0.3,
            sigma_base: 0.3,
            bump_amplitude: 0.8,
            bump_center: 3.0,
            bump_width: 1.5,
        }
    }
}

impl OracleRegressionParams {
    /// Checks that every constant is finite and that `sigma(x) > 0` everywhere.
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.amplitude,
            self.frequency,
            self.slope,
            self.sigma_base,
            self.bump_amplitude,
            self.bump_center,
            self.bump_width,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err("non-finite regression constant".into());
        }
        if self.sigma_base <= 0.0 || self.bump_amplitude < 0.0 || self.bump_width <= 0.0 {
            return Err("noise scale must stay positive: need sigma_base > 0, bump_amplitude >= 0, bump_width > 0".into());
        }
        Ok(())
    }

    pub fn mean(&self, x: f64) -> f64 {
        self.amplitude * (self.frequency * x).sin() + self.slope * x
    }

    pub fn sigma(&self, x: f64) -> f64 {
        let z = (x - self.bump_center) / self.bump_width;
        self.sigma_base + self.bump_amplitude * (-0.5 * z * z).exp()
    }
}

/// NLPD of a predictive known only through its CDF, with the density at each
/// point approximated by a central difference of half-width `delta`.
pub fn nlpd_from_cdf<T, F>(cdf: F, y: &[T], delta: T) -> Result<T, ScoringError>
where
    T: Real,
    F: Fn(T) -> T,
{
    if !(delta > T::zero() && delta.is_finite()) {
        return Err(ScoringError::BadDelta(delta.to_f64().unwrap_or(f64::NAN)));
    }
    if y.is_empty() {
        return Err(ScoringError::Empty { draws: 1, points: 0 });
    }
    let mut total = T::zero();
    for (index, &yn) in y.iter().enumerate() {
        let density = (cdf(yn + delta) - cdf(yn - delta)) / (T::lit(2.0) * delta);
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if !(density > T::zero()) {
            return Err(ScoringError::NonPositiveDensity {
                index,
                y: yn.to_f64().unwrap_or(f64::NAN),
                density: density.to_f64().unwrap_or(f64::NAN),
            });
        }
        total = total - density.ln();
    }
    Ok(total / T::from_count(y.len()))
}

/// Column name of test point `n` (zero-based) in a draws file.
pub fn loglik_column(n: usize) -> String {
    format!("log_lik.{}", n + 1)
}

/// Writes the matrix as a draws file: a `log_lik.1,...,log_lik.N` header and
/// one row per draw.
pub fn write_draws<W: Write>(loglik: &LogLikMatrix<f64>, out: W) -> Result<(), ScoringError> {
    let mut writer = csv::Writer::from_writer(out);
    let header: Vec<String> = (0..loglik.points()).map(loglik_column).collect();
    writer.write_record(&header).map_err(draws_err)?;
    for s in 0..loglik.draws() {
        let row: Vec<String> = loglik.row(s).iter().map(|&v| crate::fmt::float(v)).collect();
        writer.write_record(&row).map_err(draws_err)?;
    }
    writer.flush().map_err(|e| ScoringError::DrawsFile(e.to_string()))
}

/// Reads a draws file. Columns other than `log_lik.*` are ignored; the
/// `log_lik` columns are ordered by their index, which must run 1..=N.
pub fn read_draws<R: Read>(input: R) -> Result<LogLikMatrix<f64>, ScoringError> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let header = reader.headers().map_err(draws_err)?.clone();
    let columns = loglik_columns(header.iter())
        .map_err(ScoringError::DrawsFile)?;
    let mut values = Vec::new();
    let mut draws = 0;
    for record in reader.records() {
        let record = record.map_err(draws_err)?;
        for &col in &columns {
            let field = &record[col];
            let v: f64 = crate::fmt::parse_float(field).ok_or_else(|| {
                ScoringError::DrawsFile(format!("row {}: not a number: {field:?}", draws + 1))
            })?;
            values.push(v);
        }
        draws += 1;
    }
    LogLikMatrix::from_vec(draws, columns.len(), values)
}

/// Positions of the `log_lik.1 ... log_lik.N` columns in `header`, in index
/// order.
pub fn loglik_columns<'a, I>(header: I) -> Result<Vec<usize>, String>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut found: Vec<(usize, usize)> = Vec::new();
    for (pos, name) in header.into_iter().enumerate() {
        if let Some(idx) = name.strip_prefix("log_lik.") {
            let idx: usize = idx
                .parse()
                .map_err(|_| format!("column {name:?} is not log_lik.<integer>"))?;
            found.push((idx, pos));
        }
    }
    if found.is_empty() {
        return Err("no log_lik.* columns".to_string());
    }
    found.sort_unstable();
    for (expected, (idx, _)) in (1..).zip(&found) {
        if *idx != expected {
            return Err(format!("log_lik columns are not contiguous: expected log_lik.{expected}, found log_lik.{idx}"));
        }
    }
    Ok(found.into_iter().map(|(_, pos)| pos).collect())
}

fn draws_err(e: csv::Error) -> ScoringError {
    ScoringError::DrawsFile(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> LogLikMatrix<f64> {
        LogLikMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn single_entry() {
        assert_eq!(nlpd(&m(&[&[-1.0]])), 1.0);
        assert_eq!(pointwise_lpd(&m(&[&[-1.0]])), vec![-1.0]);
    }

    #[test]
    fn constant_minus_thousand_is_exact() {
        assert_eq!(nlpd(&m(&[&[-1000.0], &[-1000.0]])), 1000.0);
        for s in [3, 7, 1000, 4000] {
            let mat = LogLikMatrix::from_vec(s, 5, vec![-1000.0; s * 5]).unwrap();
            assert_eq!(nlpd(&mat), 1000.0, "S={s}");
        }
        let f32m = LogLikMatrix::<f32>::from_rows(&[[-1000.0f32], [-1000.0]]).unwrap();
        assert_eq!(nlpd(&f32m), 1000.0f32);
    }

    #[test]
    fn averages_densities_not_logs() {
        // (0.2 + 0.6) / 2 = 0.4
        let mat = m(&[&[0.2f64.ln()], &[0.6f64.ln()]]);
        assert!((nlpd(&mat) - 0.916_290_731_874_155).abs() < 1e-12);
        assert!((pointwise_lpd(&mat)[0] - 0.4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_draw_passthrough() {
        assert_eq!(pointwise_lpd(&m(&[&[-1.0, -2.0]])), vec![-1.0, -2.0]);
    }

    #[test]
    fn very_negative_entries_stay_finite() {
        let mat = m(&[&[-1e6, -3.0], &[-1e6 + 1.0, -1e6]]);
        let v = nlpd(&mat);
        assert!(v.is_finite());
        let lpd = pointwise_lpd(&mat);
        let expected0 = -1e6 + 1.0 + (1.0 + (-1.0f64).exp()).ln() - 2f64.ln();
        assert!((lpd[0] - expected0).abs() < 1e-9);
    }

    #[test]
    fn nan_is_rejected_with_position() {
        let err = LogLikMatrix::from_rows(&[[-1.0, -2.0], [-1.0, f64::NAN]]).unwrap_err();
        assert_eq!(err, ScoringError::NaN { draw: 1, point: 1 });
        assert!(err.to_string().contains("draw 1, point 1"));
    }

    #[test]
    fn empty_and_positive_infinity_rejected() {
        let empty: [[f64; 0]; 0] = [];
        assert!(matches!(LogLikMatrix::from_rows(&empty), Err(ScoringError::Empty { .. })));
        assert!(matches!(
            LogLikMatrix::from_rows(&[[0.0f64; 0]]),
            Err(ScoringError::Empty { .. })
        ));
        assert!(matches!(
            LogLikMatrix::from_rows(&[[f64::INFINITY]]),
            Err(ScoringError::PositiveInfinity { draw: 0, point: 0 })
        ));
        assert!(matches!(
            LogLikMatrix::from_rows(&[vec![0.0, 1.0], vec![0.0]]),
            Err(ScoringError::RaggedRow { row: 1, .. })
        ));
    }

    #[test]
    fn negative_infinity_entries() {
        // one draw assigns zero density; the other carries the column
        let mat = m(&[&[f64::NEG_INFINITY], &[0.5f64.ln()]]);
        assert!((nlpd(&mat) + 0.25f64.ln()).abs() < 1e-12);

        let all_zero = m(&[&[f64::NEG_INFINITY, -1.0], &[f64::NEG_INFINITY, -1.0]]);
        let b = nlpd_breakdown(&all_zero);
        assert_eq!(b.nlpd, f64::INFINITY);
        assert_eq!(b.zero_density_points, vec![0]);
    }

    #[test]
    fn oracle_gaussian_examples() {
        let v: f64 = oracle_nlpd_gaussian(&[0.0], &[0.0], &[1.0]).unwrap();
        assert!((v - 0.918_938_533_204_672_7).abs() < 1e-12);
        let v: f64 = oracle_nlpd_gaussian(&[3.0], &[3.0], &[1.1]).unwrap();
        assert!((v - 1.014_248_713_008_997_6).abs() < 1e-12);
        assert!(matches!(
            oracle_nlpd_gaussian(&[0.0], &[0.0], &[0.0]),
            Err(ScoringError::BadSigma { index: 0, .. })
        ));
        assert!(matches!(
            oracle_nlpd_gaussian(&[0.0, 1.0], &[0.0], &[1.0]),
            Err(ScoringError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn dgp_functions() {
        assert_eq!(dgp_mean(0.0f64), 0.0);
        assert!((dgp_sigma(3.0f64) - 1.1).abs() < 1e-15);
        assert!((dgp_mean(3.0f64) - 0.014_959_113_410_295_437).abs() < 1e-14);
        assert!((dgp_sigma(-40.0f64) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn default_regression_params_match_dgp() {
        let p = OracleRegressionParams::default();
        p.validate().unwrap();
        for x in [-5.0, -1.3, 0.0, 2.2, 3.0, 6.9] {
            assert_eq!(p.mean(x), dgp_mean(x));
            assert_eq!(p.sigma(x), dgp_sigma(x));
        }
        assert!(OracleRegressionParams { sigma_base: 0.0, ..p }.validate().is_err());
        assert!(OracleRegressionParams { slope: f64::NAN, ..p }.validate().is_err());
    }

    #[test]
    fn cdf_uniform_and_flat() {
        let uniform = |y: f64| y.clamp(0.0, 1.0);
        assert!(nlpd_from_cdf(uniform, &[0.5], 0.02).unwrap().abs() < 1e-12);

        let step = |y: f64| if y < 10.0 { 0.0 } else { 1.0 };
        let err = nlpd_from_cdf(step, &[0.5], 0.02).unwrap_err();
        assert!(matches!(err, ScoringError::NonPositiveDensity { index: 0, .. }));

        assert!(matches!(nlpd_from_cdf(uniform, &[0.5], 0.0), Err(ScoringError::BadDelta(_))));
    }

    #[test]
    fn draws_file_roundtrip() {
        let mat = m(&[&[-1.25, -0.1 + 1e-17, f64::NEG_INFINITY], &[-2.0, -3.0, -4.000000000000001]]);
        let mut buf = Vec::new();
        write_draws(&mat, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("log_lik.1,log_lik.2,log_lik.3\n"));
        assert_eq!(read_draws(&buf[..]).unwrap(), mat);
    }

    #[test]
    fn draws_file_orders_by_index_and_skips_other_columns() {
        let text = "# comment\nlp__,log_lik.2,theta,log_lik.1\n-3,-2,0.5,-1\n";
        let mat = read_draws(text.as_bytes()).unwrap();
        assert_eq!(mat.row(0), &[-1.0, -2.0]);
        assert!(read_draws("log_lik.1,log_lik.3\n-1,-2\n".as_bytes()).is_err());
        assert!(read_draws("theta\n1\n".as_bytes()).is_err());
    }
}
