//! Ground-truth feature bases and synthetic activation sampling.
//!
//! A toy model is a set of `N` orthonormal directions in `R^D` plus a firing
//! model that decides, per sample, which features are active. Every active
//! feature contributes with magnitude 1, so a sample is `x = sum_i a_i f_i`.
//!
//! Features are drawn in index order. A feature may depend on one earlier
//! feature, either through explicit conditional probabilities (hierarchy,
//! correlation by conditioning) or through a target Pearson correlation with
//! a partner, which is converted to a 2x2 joint table.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::rng::{stream_rng, STREAM_BASIS};

/// Tolerance used when validating orthonormality of a supplied basis.
pub const BASIS_TOL: f64 = 1e-6;

const FEASIBILITY_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureModelError {
    #[error("cannot place {count} orthogonal features in {dims} dimensions")]
    Dimension { count: usize, dims: usize },
    #[error("basis is not orthonormal: {0}")]
    NotOrthonormal(String),
    #[error("feature {feature}: probability {value} outside [0, 1]")]
    Probability { feature: usize, value: f64 },
    #[error("feature {feature}: depends on feature {other}, which is not an earlier feature")]
    Order { feature: usize, other: usize },
    #[error(
        "correlation {rho} infeasible for marginals ({p1}, {p2}); admissible rho in [{rho_min:.6}, {rho_max:.6}]"
    )]
    Infeasible {
        p1: f64,
        p2: f64,
        rho: f64,
        rho_min: f64,
        rho_max: f64,
    },
    #[error("firing model has {model} features but basis has {basis}")]
    CountMismatch { model: usize, basis: usize },
}

/// `N` mutually orthogonal unit-norm directions in `R^D`, stored as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBasis {
    features: Array2<f64>,
}

impl FeatureBasis {
    /// Wraps an existing `N x D` matrix after checking orthonormality.
    pub fn new(features: Array2<f64>) -> Result<Self, FeatureModelError> {
        let (n, d) = features.dim();
        if n > d || n == 0 {
            return Err(FeatureModelError::Dimension { count: n, dims: d });
        }
        let gram = features.dot(&features.t());
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                if (gram[[i, j]] - want).abs() > BASIS_TOL {
                    return Err(FeatureModelError::NotOrthonormal(format!(
                        "gram[{i},{j}] = {}",
                        gram[[i, j]]
                    )));
                }
            }
        }
        Ok(Self { features })
    }

    /// Orthonormalised Gaussian draws; deterministic in `seed`.
    pub fn random(dims: usize, count: usize, seed: u64) -> Result<Self, FeatureModelError> {
        if count > dims || count == 0 {
            return Err(FeatureModelError::Dimension { count, dims });
        }
        let mut rng = stream_rng(seed, STREAM_BASIS);
        loop {
            let draws =
                Array2::from_shape_simple_fn((count, dims), || rng.sample::<f64, _>(StandardNormal));
            // A rank-deficient Gaussian draw has probability zero; redraw if it happens.
            if let Ok(q) = linalg::orthonormal_rows(draws.view()) {
                return Ok(Self { features: q });
            }
        }
    }

    /// The first `count` coordinate axes. Handy when debugging by eye.
    pub fn axis_aligned(dims: usize, count: usize) -> Result<Self, FeatureModelError> {
        if count > dims || count == 0 {
            return Err(FeatureModelError::Dimension { count, dims });
        }
        let mut features = Array2::zeros((count, dims));
        for i in 0..count {
            features[[i, i]] = 1.0;
        }
        Ok(Self { features })
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    pub fn count(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.features
    }
}

/// Builds a basis; `axis_aligned` swaps the random rotation for coordinate axes.
pub fn make_basis(
    dims: usize,
    count: usize,
    seed: u64,
    axis_aligned: bool,
) -> Result<FeatureBasis, FeatureModelError> {
    if axis_aligned {
        FeatureBasis::axis_aligned(dims, count)
    } else {
        FeatureBasis::random(dims, count, seed)
    }
}

/// Joint distribution of two Bernoulli variables.
///
/// `p10` is the probability that the first variable fires and the second does not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub p11: f64,
    pub p10: f64,
    pub p01: f64,
    pub p00: f64,
}

impl JointTable {
    pub fn marginals(&self) -> (f64, f64) {
        (self.p11 + self.p10, self.p11 + self.p01)
    }

    /// Pearson correlation of the two indicator variables (0 when degenerate).
    pub fn correlation(&self) -> f64 {
        let (p1, p2) = self.marginals();
        let s = (p1 * (1.0 - p1) * p2 * (1.0 - p2)).sqrt();
        if s == 0.0 {
            0.0
        } else {
            (self.p11 - p1 * p2) / s
        }
    }
}

/// Joint table with marginals `p1`, `p2` and Pearson correlation `rho`.
pub fn joint_from_correlation(p1: f64, p2: f64, rho: f64) -> Result<JointTable, FeatureModelError> {
    for (feature, value) in [(0, p1), (1, p2)] {
        if !(0.0..=1.0).contains(&value) || value.is_nan() {
            return Err(FeatureModelError::Probability { feature, value });
        }
    }
    let s = (p1 * (1.0 - p1) * p2 * (1.0 - p2)).sqrt();
    let lo = (p1 + p2 - 1.0).max(0.0);
    let hi = p1.min(p2);
    let (rho_min, rho_max) = if s == 0.0 {
        (0.0, 0.0)
    } else {
        ((lo - p1 * p2) / s, (hi - p1 * p2) / s)
    };
    let infeasible = FeatureModelError::Infeasible { p1, p2, rho, rho_min, rho_max };
    if !rho.is_finite() || !(-1.0..=1.0).contains(&rho) || (s == 0.0 && rho != 0.0) {
        return Err(infeasible);
    }
    let p11 = p1 * p2 + rho * s;
    if p11 < lo - FEASIBILITY_SLACK || p11 > hi + FEASIBILITY_SLACK {
        return Err(infeasible);
    }
    let p11 = p11.clamp(lo, hi);
    let p10 = p1 - p11;
    let p01 = p2 - p11;
    Ok(JointTable { p11, p10, p01, p00: 1.0 - p1 - p2 + p11 })
}

/// How a single feature decides whether it fires.
///
/// In TOML the variant is picked by its keys: `{ p }`, `{ parent, p_on, p_off }`
/// or `{ partner, p, rho }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRule", into = "RawRule")]
pub enum FiringRule {
    /// Fires with marginal `p` and Pearson correlation `rho` to an earlier `partner`.
    Correlated { partner: usize, p: f64, rho: f64 },
    /// Fires with `p_on` if `parent` fired in this sample, else `p_off`.
    Conditional { parent: usize, p_on: f64, p_off: f64 },
    Independent { p: f64 },
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    #[serde(skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    parent: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_on: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_off: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    partner: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
}

impl TryFrom<RawRule> for FiringRule {
    type Error = String;

    fn try_from(r: RawRule) -> Result<Self, String> {
        match r {
            RawRule { p: Some(p), parent: None, p_on: None, p_off: None, partner: None, rho: None } => {
                Ok(FiringRule::Independent { p })
            }
            RawRule { p: None, parent: Some(parent), p_on: Some(p_on), p_off, partner: None, rho: None } => {
                Ok(FiringRule::Conditional { parent, p_on, p_off: p_off.unwrap_or(0.0) })
            }
            RawRule { p: Some(p), parent: None, p_on: None, p_off: None, partner: Some(partner), rho: Some(rho) } => {
                Ok(FiringRule::Correlated { partner, p, rho })
            }
            _ => Err("firing rule must be {p}, {parent, p_on[, p_off]} or {partner, p, rho}".into()),
        }
    }
}

impl From<FiringRule> for RawRule {
    fn from(r: FiringRule) -> Self {
        match r {
            FiringRule::Independent { p } => RawRule { p: Some(p), ..Default::default() },
            FiringRule::Conditional { parent, p_on, p_off } => {
                RawRule { parent: Some(parent), p_on: Some(p_on), p_off: Some(p_off), ..Default::default() }
            }
            FiringRule::Correlated { partner, p, rho } => {
                RawRule { partner: Some(partner), p: Some(p), rho: Some(rho), ..Default::default() }
            }
        }
    }
}

/// Firing probability of a feature given its (optional) dependency.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Compiled {
    Bernoulli(f64),
    Given { other: usize, p_on: f64, p_off: f64 },
}

/// Per-feature firing rules, validated and compiled to conditional probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct FiringModel {
    rules: Vec<FiringRule>,
    compiled: Vec<Compiled>,
    marginals: Vec<f64>,
}

impl FiringModel {
    pub fn new(rules: Vec<FiringRule>) -> Result<Self, FeatureModelError> {
        let mut compiled = Vec::with_capacity(rules.len());
        let mut marginals: Vec<f64> = Vec::with_capacity(rules.len());
        let check = |feature: usize, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(FeatureModelError::Probability { feature, value })
            }
        };
        for (i, rule) in rules.iter().enumerate() {
            let (c, m) = match *rule {
                FiringRule::Independent { p } => {
                    check(i, p)?;
                    (Compiled::Bernoulli(p), p)
                }
                FiringRule::Conditional { parent, p_on, p_off } => {
                    if parent >= i {
                        return Err(FeatureModelError::Order { feature: i, other: parent });
                    }
                    check(i, p_on)?;
                    check(i, p_off)?;
                    let mp = marginals[parent];
                    (Compiled::Given { other: parent, p_on, p_off }, p_on * mp + p_off * (1.0 - mp))
                }
                FiringRule::Correlated { partner, p, rho } => {
                    if partner >= i {
                        return Err(FeatureModelError::Order { feature: i, other: partner });
                    }
                    check(i, p)?;
                    let mp = marginals[partner];
                    // first variable = partner, second = this feature
                    let t = joint_from_correlation(mp, p, rho)?;
                    let p_on = if mp > 0.0 { t.p11 / mp } else { 0.0 };
                    let p_off = if mp < 1.0 { t.p01 / (1.0 - mp) } else { 0.0 };
                    (
                        Compiled::Given {
                            other: partner,
                            p_on: p_on.clamp(0.0, 1.0),
                            p_off: p_off.clamp(0.0, 1.0),
                        },
                        p,
                    )
                }
            };
            compiled.push(c);
            marginals.push(m);
        }
        Ok(Self { rules, compiled, marginals })
    }

    /// All features independent with the given probabilities.
    pub fn independent(probs: &[f64]) -> Result<Self, FeatureModelError> {
        Self::new(probs.iter().map(|&p| FiringRule::Independent { p }).collect())
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> &[FiringRule] {
        &self.rules
    }

    /// Analytic marginal firing probability of each feature.
    pub fn marginals(&self) -> &[f64] {
        &self.marginals
    }

    /// Draws one firing pattern into `bits`.
    pub fn sample_bits(&self, rng: &mut ChaCha8Rng, bits: &mut [bool]) {
        debug_assert_eq!(bits.len(), self.compiled.len());
        for i in 0..self.compiled.len() {
            let p = match self.compiled[i] {
                Compiled::Bernoulli(p) => p,
                Compiled::Given { other, p_on, p_off } => {
                    if bits[other] {
                        p_on
                    } else {
                        p_off
                    }
                }
            };
            bits[i] = rng.random::<f64>() < p;
        }
    }
}

/// A batch of activations, optionally with the ground-truth firing bits.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub x: Array2<f64>,
    pub bits: Option<Array2<u8>>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Largest `||x - sum_i a_i f_i||` over the batch (needs retained bits).
    pub fn max_reconstruction_error(&self, basis: &FeatureBasis) -> Option<f64> {
        let bits = self.bits.as_ref()?;
        let a = bits.mapv(f64::from);
        let recon = a.dot(basis.matrix());
        let diff = &self.x - &recon;
        Some(
            diff.axis_iter(Axis(0))
                .map(|r| linalg::norm(r))
                .fold(0.0, f64::max),
        )
    }
}

/// Draws `rows` samples; features are evaluated in index order.
pub fn sample_batch(
    basis: &FeatureBasis,
    firing: &FiringModel,
    rows: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampleBatch, FeatureModelError> {
    if firing.len() != basis.count() {
        return Err(FeatureModelError::CountMismatch { model: firing.len(), basis: basis.count() });
    }
    let n = basis.count();
    let mut x = Array2::zeros((rows, basis.dims()));
    let mut bits = Array2::<u8>::zeros((rows, n));
    let mut scratch = vec![false; n];
    for r in 0..rows {
        firing.sample_bits(rng, &mut scratch);
        let mut xr = x.row_mut(r);
        for (i, &on) in scratch.iter().enumerate() {
            if on {
                bits[[r, i]] = 1;
                xr += &basis.feature(i);
            }
        }
    }
    Ok(SampleBatch { x, bits: Some(bits) })
}
