//! Adaptive estimation of the index direction in single-index regressions.
//!
//! A response `y` depends on predictors `x ∈ R^p` only through `β_0^T x`,
//! with `||β_0|| = 1`. When `E[x | β_0^T x]` is linear in `β_0^T x` (as for
//! elliptical predictors), a single Newton step from the least-squares
//! direction, driven by a kernel estimate of the score
//! `∂_t log η(y | t)`, is as efficient as maximum likelihood with the
//! conditional density known.
//!
//! Modules:
//! - [`sphere`]: directions, complement bases, the local chart.
//! - [`data`]: datasets, CSV ingestion, whitening.
//! - [`score`]: kernel score estimate with trimming.
//! - [`estimator`]: the one-step adaptive estimator.
//! - [`models`]: known-link models, maximum likelihood, population information.
//! - [`simulation`]: data generation, estimating-equation residuals and the
//!   Monte Carlo comparison harness.

pub mod data;
pub mod error;
pub mod estimator;
pub mod models;
pub mod score;
pub mod simulation;
pub mod sphere;

pub use data::{load_dataset, unwhiten_direction, whiten, Dataset, Whitener};
pub use error::{Error, Result};
pub use estimator::{adaptive_fit, FitConfig, FitResult};
pub use models::{ErrorLaw, Link, ModelSpec};
pub use score::{fit_score, KernelSpec, Score, ScoreField};
pub use simulation::{run_monte_carlo, Estimator, McConfig, McReport, PredictorLaw};
pub use sphere::{align_sign, Direction};
