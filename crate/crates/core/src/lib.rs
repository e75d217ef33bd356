//! Automated improvement of Bayesian models against held-out data.
//!
//! The crate is split along the lifecycle of one experiment:
//!
//! - [`datagen`] builds datasets from known generative processes (plus the
//!   real soccer results loader) and writes them to disk.
//! - [`workspace`] lays out and protects the experiment directory.
//! - [`backend`] turns a model program and data into posterior draws, either
//!   through an external CmdStan installation or a grid approximation.
//! - [`scoring`] and [`diagnostics`] reduce draws to the held-out NLPD and
//!   sampler-health signals.
//! - [`proposer`] supplies candidate models, and [`experiment`] runs the
//!   accept/revert loop over them and keeps the JSONL log.
//!
//! The numeric kernels in [`scoring`] and [`diagnostics`] are generic over
//! [`Real`]; the aliases at the crate root fix them to `f64`, which is what
//! every file format and the loop use.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive};

pub mod backend;
pub mod datagen;
pub mod diagnostics;
pub mod experiment;
pub mod fmt;
pub mod proposer;
pub mod scoring;
pub mod trajectories;
pub mod workspace;

/// Floating point scalar accepted by the numeric kernels.
pub trait Real:
    Float + FloatConst + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` constant into this type.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant is representable")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count is representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type LogLikMatrix = scoring::LogLikMatrix<f64>;
pub type LogLikMatrixF32 = scoring::LogLikMatrix<f32>;
pub type ChainDraws = diagnostics::ChainDraws<f64>;
pub type ChainTable = diagnostics::ChainTable<f64>;
pub type DiagnosticsReport = diagnostics::DiagnosticsReport<f64>;
pub type Estimate = diagnostics::Estimate<f64>;
pub type HealthThresholds = diagnostics::HealthThresholds<f64>;
