//! Subspace projections and the hedging degree of an extended SAE pair.

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::AnalysisError;
use crate::io::csv::Table;
use crate::linalg::{self, RankError};
use crate::rng::{stream_rng, STREAM_RANDOM_SUBSPACE};
use crate::sae::SaeParams;

/// Norm of the orthogonal projection of `v` onto the row span of `w`.
pub fn subspace_projection(v: ArrayView1<f64>, w: ArrayView2<f64>) -> Result<f64, RankError> {
    let q = linalg::orthonormal_rows(w)?;
    Ok(projection_norm(v, q.view()))
}

/// `||Q v||` for orthonormal rows `Q`.
fn projection_norm(v: ArrayView1<f64>, q: ArrayView2<f64>) -> f64 {
    let c = q.dot(&v);
    c.dot(&c).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HedgingDegreeReport {
    /// Projection of each original latent's decoder drift onto the new latents.
    pub new_projection: Vec<f64>,
    /// Same drift projected onto random subspaces (mean over draws).
    pub random_projection: Vec<f64>,
    /// Mean new-latent projection minus mean random projection.
    pub h: f64,
    pub n_new: usize,
    pub seed: u64,
    pub random_draws: usize,
}

impl HedgingDegreeReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(&["latent", "new_projection", "random_projection"]);
        for (i, (a, b)) in self.new_projection.iter().zip(&self.random_projection).enumerate() {
            t.push(crate::csv_row![i, *a, *b]);
        }
        t
    }
}

fn random_unit_rows(n: usize, d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    let g = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng));
    linalg::unit_rows(g.view())
}

/// Hedging degree of `extended` (the first `L` latents of which continue
/// `base`) against a baseline of `random_draws` random `N`-dimensional
/// subspaces drawn from `seed`.
pub fn hedging_degree(
    base: &SaeParams,
    extended: &SaeParams,
    n_new: usize,
    seed: u64,
    random_draws: usize,
) -> Result<HedgingDegreeReport, AnalysisError> {
    let l = base.width();
    if extended.width() != l + n_new {
        return Err(AnalysisError::Width { expected: l + n_new, got: extended.width() });
    }
    if extended.dims() != base.dims() {
        return Err(AnalysisError::Dims(format!("{} vs {}", base.dims(), extended.dims())));
    }
    let d = base.dims();
    let u0 = linalg::unit_rows(base.w_dec.view());
    let u1 = linalg::unit_rows(extended.w_dec.view());
    let delta = &u1.slice(s![..l, ..]) - &u0;
    let q_new = linalg::orthonormal_rows(u1.slice(s![l.., ..]))?;
    let mut rng = stream_rng(seed, STREAM_RANDOM_SUBSPACE);
    let draws = random_draws.max(1);
    let q_rand: Vec<Array2<f64>> = (0..draws)
        .map(|_| linalg::orthonormal_rows(random_unit_rows(n_new, d, &mut rng).view()))
        .collect::<Result<_, _>>()?;
    let new_projection: Vec<f64> = delta.outer_iter().map(|v| projection_norm(v, q_new.view())).collect();
    let random_projection: Vec<f64> = delta
        .outer_iter()
        .map(|v| q_rand.iter().map(|q| projection_norm(v, q.view())).sum::<f64>() / draws as f64)
        .collect();
    let mean = |x: &[f64]| if x.is_empty() { 0.0 } else { x.iter().sum::<f64>() / x.len() as f64 };
    let h = mean(&new_projection) - mean(&random_projection);
    Ok(HedgingDegreeReport { new_projection, random_projection, h, n_new, seed, random_draws: draws })
}
