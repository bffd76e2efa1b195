//! Diagnostics on trained SAEs and the closed-form toy computations.

pub mod alignment;
pub mod assignment;
pub mod hedging;
pub mod loss_curve;
pub mod sweep;

use thiserror::Error;

pub use alignment::{alignment, classify, AlignmentReport, ClassifyThresholds, LatentLabel};
pub use assignment::max_weight_assignment;
pub use hedging::{hedging_degree, subspace_projection, HedgingDegreeReport};
pub use loss_curve::{argmin, loss_curve, LossCurvePoint};
pub use sweep::{hedging_vs_correlation_sweep, spearman, CorrelationSweep, SweepRow};

use crate::linalg::RankError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error("width mismatch: expected {expected} latents, got {got}")]
    Width { expected: usize, got: usize },
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error("invalid probabilities: {0}")]
    Probability(String),
    #[error("grid value {0} outside [0, 1]")]
    Grid(f64),
}
