//! Grid-approximation backend for models with at most three parameters.
//!
//! The unnormalized log posterior is evaluated at the midpoints of a regular
//! grid. Draws are sampled from the normalized grid as a categorical
//! distribution, then `log_lik` is evaluated per draw and test point. No
//! divergences are ever reported. This backend exists so the scoring and loop
//! pipeline can be checked without an external sampler.

use std::collections::HashMap;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Backend, BackendError, FitResult, ModelSource, SamplerConfig, StanData};
use crate::diagnostics::{ChainDraws, ChainTable};
use crate::scoring::{normal_lpdf, LogLikMatrix};

pub const MIN_RESOLUTION: usize = 16;
pub const MAX_DIMENSIONS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

impl GridAxis {
    pub fn new(name: impl Into<String>, lower: f64, upper: f64) -> Self {
        Self { name: name.into(), lower, upper }
    }

    fn midpoint(&self, i: usize, resolution: usize) -> f64 {
        let h = (self.upper - self.lower) / resolution as f64;
        self.lower + (i as f64 + 0.5) * h
    }
}

/// Fits by grid approximation. `log_posterior` and `loglik` receive parameter
/// values in axis order; `loglik` also gets the 0-based test point index.
pub fn grid_fit<P, L>(
    log_posterior: P,
    axes: &[GridAxis],
    resolution: usize,
    loglik: L,
    n_test: usize,
    cfg: &SamplerConfig,
) -> Result<FitResult, BackendError>
where
    P: Fn(&[f64]) -> f64,
    L: Fn(&[f64], usize) -> f64,
{
    let start = Instant::now();
    cfg.validate()?;
    if axes.is_empty() || axes.len() > MAX_DIMENSIONS {
        return Err(BackendError::Grid(format!("need 1 to {MAX_DIMENSIONS} parameters, got {}", axes.len())));
    }
    if resolution < MIN_RESOLUTION {
        return Err(BackendError::Grid(format!("resolution must be at least {MIN_RESOLUTION}, got {resolution}")));
    }
    if let Some(a) = axes.iter().find(|a| !(a.lower.is_finite() && a.upper.is_finite() && a.lower < a.upper)) {
        return Err(BackendError::Grid(format!("bad bounds for {}: [{}, {}]", a.name, a.lower, a.upper)));
    }
    if n_test == 0 {
        return Err(BackendError::Grid("no test points".into()));
    }

    let dims = axes.len();
    let cells = resolution.pow(dims as u32);
    let point = |mut flat: usize| -> Vec<f64> {
        let mut theta = vec![0.0; dims];
        for d in (0..dims).rev() {
            theta[d] = axes[d].midpoint(flat % resolution, resolution);
            flat /= resolution;
        }
        theta
    };

    let mut log_post = Vec::with_capacity(cells);
    for flat in 0..cells {
        let lp = log_posterior(&point(flat));
        if lp.is_nan() {
            return Err(BackendError::Grid(format!("log posterior is NaN at {:?}", point(flat))));
        }
        log_post.push(lp);
    }
    let max = log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(BackendError::Grid("log posterior is -inf on the whole grid".into()));
    }
    let weights: Vec<f64> = log_post.iter().map(|&lp| (lp - max).exp()).collect();
    let categorical = WeightedIndex::new(&weights).map_err(|e| BackendError::Grid(e.to_string()))?;

    let mut names = vec!["lp__".to_string()];
    names.extend(axes.iter().map(|a| a.name.clone()));
    let mut tables = Vec::with_capacity(cfg.chains);
    let mut ll = Vec::with_capacity(cfg.chains * cfg.sampling_draws * n_test);
    for chain in 0..cfg.chains {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.chain_seed(chain));
        let mut columns = vec![Vec::with_capacity(cfg.sampling_draws); dims + 1];
        for _ in 0..cfg.sampling_draws {
            let flat = categorical.sample(&mut rng);
            let theta = point(flat);
            columns[0].push(log_post[flat]);
            for (d, &v) in theta.iter().enumerate() {
                columns[d + 1].push(v);
            }
            for n in 0..n_test {
                ll.push(loglik(&theta, n));
            }
        }
        tables.push(ChainTable::from_columns(columns, vec![false; cfg.sampling_draws]));
    }
    let draws = ChainDraws::new(names, tables)?;
    let loglik = LogLikMatrix::from_vec(cfg.chains * cfg.sampling_draws, n_test, ll)?;
    Ok(FitResult { draws, loglik, wall_time: start.elapsed(), backend_id: "grid".to_string() })
}

/// A model the grid backend can fit, built from a data set.
pub trait GridModel: Send + Sync {
    fn axes(&self) -> Vec<GridAxis>;
    fn log_posterior(&self, theta: &[f64]) -> f64;
    fn loglik(&self, theta: &[f64], point: usize) -> f64;
    fn test_points(&self) -> usize;
}

pub type GridModelFactory = Box<dyn Fn(&StanData) -> Result<Box<dyn GridModel>, BackendError> + Send + Sync>;

/// Backend that maps model texts (by hash) to grid models.
pub struct GridBackend {
    resolution: usize,
    models: HashMap<String, GridModelFactory>,
    fallback: Option<GridModelFactory>,
}

impl GridBackend {
    pub fn new(resolution: usize) -> Self {
        Self { resolution, models: HashMap::new(), fallback: None }
    }

    pub fn register(&mut self, model: &ModelSource, factory: GridModelFactory) -> &mut Self {
        self.models.insert(model.hash().to_string(), factory);
        self
    }

    /// Model used for any text without a registered factory.
    pub fn with_fallback(mut self, factory: GridModelFactory) -> Self {
        self.fallback = Some(factory);
        self
    }
}

impl Backend for GridBackend {
    fn id(&self) -> &str {
        "grid"
    }

    fn fit(&self, model: &ModelSource, data: &StanData, cfg: &SamplerConfig) -> Result<FitResult, BackendError> {
        let factory = self
            .models
            .get(model.hash())
            .or(self.fallback.as_ref())
            .ok_or_else(|| BackendError::Compile {
                message: format!("grid backend has no model registered for {}", model.hash()),
            })?;
        let gm = factory(data)?;
        grid_fit(
            |t| gm.log_posterior(t),
            &gm.axes(),
            self.resolution,
            |t, n| gm.loglik(t, n),
            gm.test_points(),
            cfg,
        )
    }
}

fn required_vector<'a>(data: &'a StanData, name: &str) -> Result<&'a [f64], BackendError> {
    data.vector(name)
        .ok_or_else(|| BackendError::Grid(format!("data has no vector {name:?}")))
}

/// Normal mean with known noise scale and a `Normal(prior_mean, prior_sd)`
/// prior. Reads `y_train` and `y_test`.
#[derive(Debug, Clone)]
pub struct NormalMeanModel {
    pub prior_mean: f64,
    pub prior_sd: f64,
    pub sigma: f64,
    pub train: Vec<f64>,
    pub test: Vec<f64>,
    pub axis: GridAxis,
}

impl NormalMeanModel {
    pub fn from_data(data: &StanData, prior_mean: f64, prior_sd: f64, sigma: f64) -> Result<Self, BackendError> {
        let train = required_vector(data, "y_train")?.to_vec();
        let test = required_vector(data, "y_test")?.to_vec();
        let axis = GridAxis::new("mu", prior_mean - 8.0 * prior_sd, prior_mean + 8.0 * prior_sd);
        Ok(Self { prior_mean, prior_sd, sigma, train, test, axis })
    }
}

impl GridModel for NormalMeanModel {
    fn axes(&self) -> Vec<GridAxis> {
        vec![self.axis.clone()]
    }

    fn log_posterior(&self, theta: &[f64]) -> f64 {
        let mu = theta[0];
        normal_lpdf(mu, self.prior_mean, self.prior_sd)
            + self.train.iter().map(|&y| normal_lpdf(y, mu, self.sigma)).sum::<f64>()
    }

    fn loglik(&self, theta: &[f64], point: usize) -> f64 {
        normal_lpdf(self.test[point], theta[0], self.sigma)
    }

    fn test_points(&self) -> usize {
        self.test.len()
    }
}

/// Straight-line regression with Gaussian noise on the 1D regression data
/// interface (`predictor_*`, `response_*`), parameterized by intercept, slope
/// and `log_sigma`. Priors: intercept and slope `Normal(0, 10)`, sigma
/// half-`Normal(0, 10)`. This is the grid counterpart of the
/// `linear_gaussian` fixture.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    x_train: Vec<f64>,
    y_train: Vec<f64>,
    x_test: Vec<f64>,
    y_test: Vec<f64>,
    axes: Vec<GridAxis>,
}

impl LinearGaussianModel {
    pub fn from_data(data: &StanData) -> Result<Self, BackendError> {
        let x_train = required_vector(data, "predictor_train")?.to_vec();
        let y_train = required_vector(data, "response_train")?.to_vec();
        let x_test = required_vector(data, "predictor_test")?.to_vec();
        let y_test = required_vector(data, "response_test")?.to_vec();
        if x_train.len() != y_train.len() || x_test.len() != y_test.len() || x_train.len() < 3 {
            return Err(BackendError::Grid("inconsistent regression data".into()));
        }
        // Bounds: least-squares estimate +/- 8 standard errors.
        let n = x_train.len() as f64;
        let mx = x_train.iter().sum::<f64>() / n;
        let my = y_train.iter().sum::<f64>() / n;
        let sxx: f64 = x_train.iter().map(|x| (x - mx).powi(2)).sum();
        let sxy: f64 = x_train.iter().zip(&y_train).map(|(x, y)| (x - mx) * (y - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let rss: f64 = x_train.iter().zip(&y_train).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        let s = (rss / (n - 2.0)).sqrt();
        let se_slope = s / sxx.sqrt();
        let se_intercept = s * (1.0 / n + mx * mx / sxx).sqrt();
        let se_log_sigma = (1.0 / (2.0 * n)).sqrt();
        let axes = vec![
            GridAxis::new("alpha", intercept - 8.0 * se_intercept, intercept + 8.0 * se_intercept),
            GridAxis::new("beta", slope - 8.0 * se_slope, slope + 8.0 * se_slope),
            GridAxis::new("log_sigma", s.ln() - 8.0 * se_log_sigma, s.ln() + 8.0 * se_log_sigma),
        ];
        Ok(Self { x_train, y_train, x_test, y_test, axes })
    }
}

impl GridModel for LinearGaussianModel {
    fn axes(&self) -> Vec<GridAxis> {
        self.axes.clone()
    }

    fn log_posterior(&self, theta: &[f64]) -> f64 {
        let (a, b, log_sigma) = (theta[0], theta[1], theta[2]);
        let sigma = log_sigma.exp();
        // half-normal prior on sigma plus the log-scale Jacobian
        let prior = normal_lpdf(a, 0.0, 10.0) + normal_lpdf(b, 0.0, 10.0) + normal_lpdf(sigma, 0.0, 10.0) + log_sigma;
        prior
            + self
                .x_train
                .iter()
                .zip(&self.y_train)
                .map(|(&x, &y)| normal_lpdf(y, a + b * x, sigma))
                .sum::<f64>()
    }

    fn loglik(&self, theta: &[f64], point: usize) -> f64 {
        let (a, b, sigma) = (theta[0], theta[1], theta[2].exp());
        normal_lpdf(self.y_test[point], a + b * self.x_test[point], sigma)
    }

    fn test_points(&self) -> usize {
        self.x_test.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::divergence_count;

    fn cfg(chains: usize, draws: usize) -> SamplerConfig {
        SamplerConfig { chains, sampling_draws: draws, seed: 3, ..Default::default() }
    }

    #[test]
    fn single_draw_gives_one_row() {
        let fit = grid_fit(|t| -t[0] * t[0], &[GridAxis::new("x", -3.0, 3.0)], 16, |_, _| -1.0, 1, &cfg(1, 1)).unwrap();
        assert_eq!(fit.loglik.draws(), 1);
        assert_eq!(fit.loglik.points(), 1);
        assert_eq!(divergence_count(&fit.draws), 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let axis = [GridAxis::new("x", -1.0, 1.0)];
        assert!(grid_fit(|_| 0.0, &axis, 8, |_, _| 0.0, 1, &cfg(1, 1)).is_err());
        assert!(grid_fit(|_| f64::NEG_INFINITY, &axis, 16, |_, _| 0.0, 1, &cfg(1, 1)).is_err());
        let four: Vec<GridAxis> = (0..4).map(|i| GridAxis::new(format!("p{i}"), 0.0, 1.0)).collect();
        assert!(grid_fit(|_| 0.0, &four, 16, |_, _| 0.0, 1, &cfg(1, 1)).is_err());
        assert!(grid_fit(|_| 0.0, &[GridAxis::new("x", 1.0, f64::INFINITY)], 16, |_, _| 0.0, 1, &cfg(1, 1)).is_err());
    }

    #[test]
    fn draws_concentrate_where_posterior_is() {
        // posterior supported on one cell only
        let axis = [GridAxis::new("x", 0.0, 16.0)];
        let fit = grid_fit(
            |t| if (t[0] - 4.5).abs() < 1e-9 { 0.0 } else { f64::NEG_INFINITY },
            &axis,
            16,
            |t, _| -t[0],
            1,
            &cfg(2, 50),
        )
        .unwrap();
        let xs = fit.draws.param("x").unwrap();
        assert!(xs.iter().all(|c| c.iter().all(|&v| v == 4.5)));
        assert!(fit.loglik.as_slice().iter().all(|&v| v == -4.5));
    }

    #[test]
    fn backend_dispatches_by_hash() {
        let mut data = StanData::new();
        data.insert("y_train", super::super::StanValue::Vector(vec![0.1, -0.2, 0.3]));
        data.insert("y_test", super::super::StanValue::Vector(vec![0.0, 0.5]));
        let model = ModelSource::new("normal mean").unwrap();
        let mut backend = GridBackend::new(64);
        backend.register(
            &model,
            Box::new(|d| Ok(Box::new(NormalMeanModel::from_data(d, 0.0, 10.0, 1.0)?) as Box<dyn GridModel>)),
        );
        let fit = backend.fit(&model, &data, &cfg(2, 100)).unwrap();
        assert_eq!(fit.loglik.points(), 2);
        let other = ModelSource::new("something else").unwrap();
        assert!(matches!(backend.fit(&other, &data, &cfg(1, 1)), Err(BackendError::Compile { .. })));
    }
}
