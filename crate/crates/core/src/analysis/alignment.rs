//! Latent-to-feature cosine alignment and latent classification.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{max_weight_assignment, AnalysisError};
use crate::feature_model::FeatureBasis;
use crate::io::csv::Table;
use crate::linalg;
use crate::sae::SaeParams;

/// What a latent represents relative to the true features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentLabel {
    Monosemantic,
    /// Off-target features mixed into encoder and decoder alike.
    Hedged,
    /// Encoder and decoder disagree on an off-target feature.
    Absorbed,
    Dead,
    /// Nonzero decoder with no feature component above threshold.
    Unaligned,
}

impl LatentLabel {
    pub fn name(&self) -> &'static str {
        match self {
            LatentLabel::Monosemantic => "monosemantic",
            LatentLabel::Hedged => "hedged",
            LatentLabel::Absorbed => "absorbed",
            LatentLabel::Dead => "dead",
            LatentLabel::Unaligned => "unaligned",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyThresholds {
    /// Components with `|cos| <= epsilon` count as absent.
    pub epsilon: f64,
    /// Minimum encoder/decoder difference that counts as asymmetric.
    pub gap: f64,
}

impl Default for ClassifyThresholds {
    fn default() -> Self {
        Self { epsilon: 0.05, gap: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentReport {
    /// `cos(W_enc[i], f_j)`, latents by features.
    pub encoder_cos: Array2<f64>,
    /// `cos(W_dec[i], f_j)`.
    pub decoder_cos: Array2<f64>,
    /// Feature matched to each latent (`None` when there are more latents than features).
    pub matching: Vec<Option<usize>>,
    pub dead: Vec<bool>,
    pub labels: Vec<LatentLabel>,
    /// `b_dec . f_j` for each feature.
    pub bias_projection: Vec<f64>,
    pub bias_norm: f64,
}

/// Cosines of every encoder and decoder row with every true feature, the
/// optimal latent-feature matching, and default-threshold labels.
pub fn alignment(params: &SaeParams, basis: &FeatureBasis) -> Result<AlignmentReport, AnalysisError> {
    if basis.dims() != params.dims() {
        return Err(AnalysisError::Dims(format!("basis in R^{} vs SAE in R^{}", basis.dims(), params.dims())));
    }
    let (l, n) = (params.width(), basis.count());
    let dead: Vec<bool> = params.w_dec.outer_iter().map(|r| r.iter().all(|&v| v == 0.0)).collect();
    let cos_matrix = |w: &Array2<f64>| {
        Array2::from_shape_fn((l, n), |(i, j)| if dead[i] { 0.0 } else { linalg::cosine(w.row(i), basis.feature(j)) })
    };
    let encoder_cos = cos_matrix(params.w_enc());
    let decoder_cos = cos_matrix(&params.w_dec);
    let matching = max_weight_assignment(decoder_cos.mapv(f64::abs).view());
    let bias_projection = (0..n).map(|j| linalg::dot(params.b_dec.view(), basis.feature(j))).collect();
    let mut report = AlignmentReport {
        encoder_cos,
        decoder_cos,
        matching,
        dead,
        labels: Vec::new(),
        bias_projection,
        bias_norm: linalg::norm(params.b_dec.view()),
    };
    report.labels = classify(&report, ClassifyThresholds::default());
    Ok(report)
}

fn classify_row(enc: ArrayView1<f64>, dec: ArrayView1<f64>, target: usize, t: ClassifyThresholds) -> LatentLabel {
    let eps = t.epsilon;
    let asymmetric = (0..dec.len()).filter(|&j| j != target).any(|j| {
        let (e, d) = (enc[j], dec[j]);
        (e - d).abs() > t.gap && (e * d < 0.0 || e.abs().min(d.abs()) <= eps)
    });
    if asymmetric {
        return LatentLabel::Absorbed;
    }
    match dec.iter().filter(|v| v.abs() > eps).count() {
        0 => LatentLabel::Unaligned,
        1 => LatentLabel::Monosemantic,
        _ => LatentLabel::Hedged,
    }
}

/// Labels every latent; off-target means every feature except the matched one.
pub fn classify(report: &AlignmentReport, thresholds: ClassifyThresholds) -> Vec<LatentLabel> {
    (0..report.decoder_cos.nrows())
        .map(|i| {
            if report.dead[i] {
                return LatentLabel::Dead;
            }
            let dec = report.decoder_cos.row(i);
            let target = report.matching[i].unwrap_or_else(|| {
                (0..dec.len()).max_by(|&a, &b| dec[a].abs().total_cmp(&dec[b].abs())).unwrap_or(0)
            });
            classify_row(report.encoder_cos.row(i), dec, target, thresholds)
        })
        .collect()
}

impl AlignmentReport {
    pub fn width(&self) -> usize {
        self.decoder_cos.nrows()
    }

    /// Latent matched to feature `j`, if any.
    pub fn latent_for(&self, feature: usize) -> Option<usize> {
        self.matching.iter().position(|m| *m == Some(feature))
    }

    /// Smallest matched decoder cosine (absolute value) over all matched latents.
    pub fn min_matched_decoder_cos(&self) -> f64 {
        self.matching
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.map(|j| self.decoder_cos[[i, j]].abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest |cosine| over every encoder and decoder entry outside the matching.
    pub fn max_off_target(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.width() {
            for j in 0..self.decoder_cos.ncols() {
                if self.matching[i] != Some(j) {
                    worst = worst.max(self.encoder_cos[[i, j]].abs()).max(self.decoder_cos[[i, j]].abs());
                }
            }
        }
        worst
    }

    /// Largest unmatched |decoder cosine|.
    pub fn max_off_target_decoder(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.width() {
            for j in 0..self.decoder_cos.ncols() {
                if self.matching[i] != Some(j) {
                    worst = worst.max(self.decoder_cos[[i, j]].abs());
                }
            }
        }
        worst
    }

    /// Long-form table: one row per (latent, feature).
    pub fn cosine_table(&self) -> Table {
        let mut t = Table::new(&["latent", "feature", "encoder_cos", "decoder_cos", "matched", "label"]);
        for i in 0..self.width() {
            for j in 0..self.decoder_cos.ncols() {
                t.push(crate::csv_row![
                    i,
                    j,
                    self.encoder_cos[[i, j]],
                    self.decoder_cos[[i, j]],
                    self.matching[i] == Some(j),
                    self.labels[i].name()
                ]);
            }
        }
        t
    }

    /// One row per feature: `b_dec . f_j`.
    pub fn bias_table(&self) -> Table {
        let mut t = Table::new(&["feature", "bias_projection"]);
        for (j, v) in self.bias_projection.iter().enumerate() {
            t.push(crate::csv_row![j, *v]);
        }
        t
    }
}
