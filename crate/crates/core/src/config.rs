//! TOML experiment configuration.
//!
//! Every section rejects unknown keys. [`ExperimentConfig::validate`] checks
//! that the sections a kind needs are present and internally consistent.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{ClassifyThresholds, CorrelationSweep};
use crate::feature_model::{FeatureBasis, FiringModel, FiringRule};
use crate::sae::{Activation, MatryoshkaSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{kind} config requires a [{section}] section")]
    MissingSection { kind: &'static str, section: &'static str },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    ToyFigure,
    SingleLatent,
    CorrelationSweep,
    LossCurve,
    FullWidthControl,
    HedgingDegree,
    BalanceToy,
    UnbalanceableToy,
    BalanceSweep,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::ToyFigure => "toy_figure",
            ExperimentKind::SingleLatent => "single_latent",
            ExperimentKind::CorrelationSweep => "correlation_sweep",
            ExperimentKind::LossCurve => "loss_curve",
            ExperimentKind::FullWidthControl => "full_width_control",
            ExperimentKind::HedgingDegree => "hedging_degree",
            ExperimentKind::BalanceToy => "balance_toy",
            ExperimentKind::UnbalanceableToy => "unbalanceable_toy",
            ExperimentKind::BalanceSweep => "balance_sweep",
        }
    }
}

/// Toy feature model: `count = rules.len()` orthonormal features in `R^dims`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesSection {
    pub dims: usize,
    #[serde(default)]
    pub axis_aligned: bool,
    pub rules: Vec<FiringRule>,
}

impl FeaturesSection {
    pub fn firing(&self) -> Result<FiringModel, ConfigError> {
        FiringModel::new(self.rules.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn basis(&self, seed: u64) -> Result<FeatureBasis, ConfigError> {
        crate::feature_model::make_basis(self.dims, self.rules.len(), seed, self.axis_aligned)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

fn default_init_norm() -> f64 {
    0.1
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeSection {
    /// One SAE is trained per width.
    pub widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub tied: bool,
    #[serde(default = "default_init_norm")]
    pub init_norm: f64,
    /// Nested prefixes; the last prefix is replaced by each width.
    #[serde(default)]
    pub matryoshka: Option<MatryoshkaSpec>,
    /// Start latent `i` at feature `init_to_features[i]` (unit norm, zero biases).
    #[serde(default)]
    pub init_to_features: Option<Vec<usize>>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HedgingSection {
    pub n_new: usize,
    /// Samples used to continue training the base and extended SAEs.
    pub continue_samples: u64,
    #[serde(default = "one")]
    pub random_draws: usize,
    #[serde(default = "default_init_norm")]
    pub extend_init_norm: f64,
    /// Train on an activation stream instead of the toy model.
    #[serde(default)]
    pub stream: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceSection {
    /// Inner-level loss weights to try (the outer level keeps weight 1).
    pub betas: Vec<f64>,
    /// Also train a detached-inner variant.
    #[serde(default = "yes")]
    pub include_detached: bool,
    /// Index of the parent feature whose latent is inspected.
    #[serde(default)]
    pub parent: usize,
}

fn default_grid_steps() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossCurveSection {
    /// `[P_alone, P_both]` pairs.
    pub cases: Vec<[f64; 2]>,
    pub l1_coeffs: Vec<f64>,
    #[serde(default = "default_grid_steps")]
    pub grid_steps: usize,
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub features: Option<FeaturesSection>,
    #[serde(default)]
    pub sae: Option<SaeSection>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub sweep: Option<CorrelationSweep>,
    #[serde(default)]
    pub hedging: Option<HedgingSection>,
    #[serde(default)]
    pub balance: Option<BalanceSection>,
    #[serde(default)]
    pub loss_curve: Option<LossCurveSection>,
    #[serde(default)]
    pub classify: Option<ClassifyThresholds>,
}

/// Hex SHA-256 of raw config text.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads, parses and validates a config file; also returns its raw text.
    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let cfg = Self::from_toml_str(&text)?;
        cfg.validate()?;
        Ok((cfg, text))
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn thresholds(&self) -> ClassifyThresholds {
        self.classify.unwrap_or_default()
    }

    fn need<'a, T>(&self, s: &'a Option<T>, section: &'static str) -> Result<&'a T, ConfigError> {
        s.as_ref().ok_or(ConfigError::MissingSection { kind: self.kind.name(), section })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        use ExperimentKind::*;
        if self.seeds.is_empty() {
            return invalid("seeds must not be empty");
        }
        match self.kind {
            ToyFigure | SingleLatent | FullWidthControl => {
                let f = self.need(&self.features, "features")?;
                self.check_toy(f, self.need(&self.sae, "sae")?, self.need(&self.train, "train")?)?;
            }
            CorrelationSweep => {
                let s = self.need(&self.sweep, "sweep")?;
                s.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if s.rhos.is_empty() || s.dims < 2 {
                    return invalid("sweep needs at least one rho and dims >= 2");
                }
            }
            LossCurve => {
                let l = self.need(&self.loss_curve, "loss_curve")?;
                if l.grid_steps == 0 || l.cases.is_empty() || l.l1_coeffs.is_empty() {
                    return invalid("loss_curve needs cases, l1_coeffs and grid_steps > 0");
                }
                for [a, b] in &l.cases {
                    if !(*a >= 0.0 && *b >= 0.0 && a + b <= 1.0) {
                        return invalid(format!("loss_curve case [{a}, {b}] is not a probability pair"));
                    }
                }
                if l.l1_coeffs.iter().any(|c| !(*c >= 0.0)) {
                    return invalid("l1_coeffs must be >= 0");
                }
            }
            HedgingDegree => {
                let h = self.need(&self.hedging, "hedging")?;
                let sae = self.need(&self.sae, "sae")?;
                let train = self.need(&self.train, "train")?;
                if h.n_new == 0 || h.continue_samples == 0 {
                    return invalid("hedging needs n_new > 0 and continue_samples > 0");
                }
                match (&self.features, &h.stream) {
                    (Some(f), None) => self.check_toy(f, sae, train)?,
                    (None, Some(_)) => self.check_sae(sae, usize::MAX, train)?,
                    _ => return invalid("hedging_degree needs exactly one of [features] or hedging.stream"),
                }
            }
            BalanceToy | UnbalanceableToy | BalanceSweep => {
                let f = self.need(&self.features, "features")?;
                let sae = self.need(&self.sae, "sae")?;
                self.check_toy(f, sae, self.need(&self.train, "train")?)?;
                let b = self.need(&self.balance, "balance")?;
                if sae.matryoshka.is_none() {
                    return invalid("balance experiments need sae.matryoshka prefixes");
                }
                if b.betas.is_empty() && !b.include_detached {
                    return invalid("balance needs at least one beta or include_detached");
                }
                if b.betas.iter().any(|v| !(*v >= 0.0)) {
                    return invalid("balance betas must be >= 0");
                }
                if b.parent >= f.rules.len() {
                    return invalid(format!("balance.parent {} out of range", b.parent));
                }
            }
        }
        Ok(())
    }

    fn check_toy(&self, f: &FeaturesSection, sae: &SaeSection, train: &TrainConfig) -> Result<(), ConfigError> {
        f.firing()?;
        if f.rules.is_empty() || f.rules.len() > f.dims {
            return invalid(format!("{} features do not fit in {} dimensions", f.rules.len(), f.dims));
        }
        self.check_sae(sae, f.rules.len(), train)
    }

    fn check_sae(&self, sae: &SaeSection, n_features: usize, train: &TrainConfig) -> Result<(), ConfigError> {
        train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if sae.widths.is_empty() || sae.widths.contains(&0) {
            return invalid("sae.widths must be non-empty and positive");
        }
        if !(sae.init_norm >= 0.0) {
            return invalid("sae.init_norm must be >= 0");
        }
        for &w in &sae.widths {
            if let Some(k) = sae.activation.k() {
                if k == 0 || k > w {
                    return invalid(format!("k = {k} does not fit width {w}"));
                }
            }
            if let Some(m) = &sae.matryoshka {
                let mut m = m.clone();
                if let Some(last) = m.prefixes.last_mut() {
                    *last = w;
                }
                m.validate(w).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
        }
        if let Some(init) = &sae.init_to_features {
            if init.iter().any(|&j| j >= n_features) {
                return invalid("init_to_features names a feature that does not exist");
            }
            if sae.widths.iter().any(|&w| init.len() > w) {
                return invalid("init_to_features lists more latents than the SAE has");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
kind = "toy_figure"
seeds = [0, 1]

[features]
dims = 50
rules = [{ p = 0.25 }, { p = 0.25 }, { parent = 1, p_on = 0.2, p_off = 0.0 }]

[sae]
widths = [2, 3]

[train]
batch_size = 128
total_samples = 100000
l1_coeff = 0.001
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = ExperimentConfig::from_toml_str(TOY).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds, vec![0, 1]);
        assert_eq!(cfg.features.as_ref().unwrap().rules.len(), 3);
        assert_eq!(cfg.sae.as_ref().unwrap().activation, Activation::Relu);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = TOY.replace("batch_size", "batchsize");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(ConfigError::Parse(_))));
        let bad = TOY.replace("{ p = 0.25 }", "{ p = 0.25, q = 1 }");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn missing_section_rejected() {
        let cfg = ExperimentConfig::from_toml_str(&TOY.replace("kind = \"toy_figure\"", "kind = \"balance_toy\""))
            .unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::MissingSection { section: "balance", .. })));
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
