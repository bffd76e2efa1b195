//! Hedging of a single latent as a function of feature correlation.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::feature_model::{joint_from_correlation, FeatureBasis, FiringModel, FiringRule};
use crate::io::csv::Table;
use crate::linalg;
use crate::rng::{stream_rng, STREAM_DATA};
use crate::sae::{init_sae, Activation};
use crate::trainer::{train, SyntheticSource, TrainConfig, TrainError};

/// A single-latent SAE initialised at `f1`, trained on two features with
/// marginals `p1`, `p2` and Pearson correlation `rho`, for every `rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationSweep {
    pub dims: usize,
    pub p1: f64,
    pub p2: f64,
    pub rhos: Vec<f64>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub rho: f64,
    pub seed: u64,
    pub cos_l_f2: f64,
    pub cos_l_f1: f64,
}

fn run_point(cfg: &CorrelationSweep, rho: f64, seed: u64) -> Result<SweepRow, TrainError> {
    let basis = FeatureBasis::random(cfg.dims, 2, seed)?;
    let firing = FiringModel::new(vec![
        FiringRule::Independent { p: cfg.p1 },
        FiringRule::Correlated { partner: 0, p: cfg.p2, rho },
    ])?;
    let mut params = init_sae(cfg.dims, 1, Activation::Relu, false, None, 0.0, seed)?;
    params.set_latent_direction(0, basis.feature(0));
    let mut source = SyntheticSource::new(basis.clone(), firing, stream_rng(seed, STREAM_DATA))?;
    let (state, _) = train(&mut source, &cfg.train, params)?;
    let row = state.params.w_dec.row(0);
    Ok(SweepRow {
        rho,
        seed,
        cos_l_f2: linalg::cosine(row, basis.feature(1)),
        cos_l_f1: linalg::cosine(row, basis.feature(0)),
    })
}

/// Runs every feasible `(rho, seed)` point in parallel; infeasible
/// correlations are skipped with a warning.
pub fn hedging_vs_correlation_sweep(cfg: &CorrelationSweep, seeds: &[u64]) -> Result<Vec<SweepRow>, TrainError> {
    cfg.train.validate()?;
    let feasible: Vec<f64> = cfg
        .rhos
        .iter()
        .copied()
        .filter(|&rho| match joint_from_correlation(cfg.p1, cfg.p2, rho) {
            Ok(_) => true,
            Err(e) => {
                warn!("skipping rho = {rho}: {e}");
                false
            }
        })
        .collect();
    let points: Vec<(f64, u64)> = feasible.iter().flat_map(|&r| seeds.iter().map(move |&s| (r, s))).collect();
    points.par_iter().map(|&(rho, seed)| run_point(cfg, rho, seed)).collect()
}

/// Median `cos(l, f2)` per distinct `rho`, in increasing `rho` order.
pub fn medians_by_rho(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    let mut rhos: Vec<f64> = rows.iter().map(|r| r.rho).collect();
    rhos.sort_by(f64::total_cmp);
    rhos.dedup();
    rhos.into_iter()
        .map(|rho| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.rho == rho).map(|r| r.cos_l_f2).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let med = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
            (rho, med)
        })
        .collect()
}

/// Average ranks (ties share their mean rank), 1-based.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new(&["rho", "seed", "cos_l_f2", "cos_l_f1"]);
    for r in rows {
        t.push(crate::csv_row![r.rho, r.seed, r.cos_l_f2, r.cos_l_f1]);
    }
    t
}
