//! Toy-model laboratory for feature hedging and feature absorption in sparse
//! autoencoders.
//!
//! The crate is organised bottom-up:
//!
//! - [`feature_model`]: orthonormal ground-truth feature bases and Bernoulli
//!   firing models (independent, hierarchical, correlated).
//! - [`sae`]: SAE parameters, forward pass, TopK/BatchTopK selection and the
//!   loss family (L1, matryoshka, balance matryoshka, detached levels, aux-k).
//! - [`trainer`]: analytic gradients, Adam, L1 warm-up, dead-latent tracking
//!   and the extend-and-continue protocol used for hedging degree.
//! - [`analysis`]: cosine alignment, hedged/absorbed classification, subspace
//!   projections, hedging degree, correlation sweeps and closed-form loss curves.
//! - [`io`]: checkpoint and activation-stream binary formats plus CSV output.
//! - [`config`] and [`experiments`]: TOML experiment configs and the driver
//!   that reproduces each toy experiment.

pub mod analysis;
pub mod config;
pub mod experiments;
pub mod feature_model;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod sae;
pub mod trainer;

pub use feature_model::{FeatureBasis, FiringModel, FiringRule, JointTable, SampleBatch};
pub use sae::{Activation, LossBreakdown, LossOptions, MatryoshkaSpec, SaeParams, SparsityPenalty};
pub use trainer::{TrainConfig, TrainerState};
