//! Distributional regression engine for intermittent retail count demand.
//!
//! The crate models every parameter of a count distribution (location and
//! scale) with its own linked linear predictor, fit by cyclic IWLS
//! backfitting with lasso regularization, and evaluates the resulting
//! quantile forecasts with pinball loss.

pub mod clustering;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod iwls;
pub mod pipeline;

pub use dist::{Family, Link, ParamVector};
pub use error::{Error, Result};
pub use features::{DesignMatrix, SalesPanel};
pub use iwls::{FitConfig, FitResult, IcValues, InfoCriterion};
pub use pipeline::PipelineConfig;
