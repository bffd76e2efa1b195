//! Expected loss of a tied single-latent SAE whose direction interpolates
//! between a parent feature `f1` and a child feature `f2`.
//!
//! Inputs are `f1` alone with probability `P_alone`, `f1 + f2` with
//! probability `P_both`, and zero otherwise. Biases are fixed at zero, so the
//! zero input costs nothing. The latent is `l = unit((1 - a) f1 + a f2)`.

use serde::Serialize;

use super::AnalysisError;
use crate::io::csv::Table;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossCurvePoint {
    /// Interpolation weight on `f2`.
    pub alpha: f64,
    pub total: f64,
    pub mse: f64,
    pub l1: f64,
}

/// Squared error and activation for input `x` (in feature coordinates).
fn case_loss(l: (f64, f64), x: (f64, f64)) -> (f64, f64) {
    let z = (l.0 * x.0 + l.1 * x.1).max(0.0);
    let e = (x.0 - z * l.0, x.1 - z * l.1);
    (e.0 * e.0 + e.1 * e.1, z)
}

fn latent(alpha: f64) -> (f64, f64) {
    let (a, b) = (1.0 - alpha, alpha);
    let n = (a * a + b * b).sqrt();
    (a / n, b / n)
}

/// Expected loss per grid point.
pub fn loss_curve(p_alone: f64, p_both: f64, l1_coeff: f64, grid: &[f64]) -> Result<Vec<LossCurvePoint>, AnalysisError> {
    if !(0.0..=1.0).contains(&p_alone) || !(0.0..=1.0).contains(&p_both) || p_alone + p_both > 1.0 + 1e-12 {
        return Err(AnalysisError::Probability(format!("P_alone = {p_alone}, P_both = {p_both}")));
    }
    if let Some(&bad) = grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(AnalysisError::Grid(bad));
    }
    Ok(grid
        .iter()
        .map(|&alpha| {
            let l = latent(alpha);
            let (m1, z1) = case_loss(l, (1.0, 0.0));
            let (m2, z2) = case_loss(l, (1.0, 1.0));
            let mse = p_alone * m1 + p_both * m2;
            let l1 = l1_coeff * (p_alone * z1 + p_both * z2);
            LossCurvePoint { alpha, total: mse + l1, mse, l1 }
        })
        .collect())
}

/// Loss of one sampled input, for Monte-Carlo checks: `which` is 0 (nothing),
/// 1 (`f1`) or 2 (`f1 + f2`).
pub fn sample_loss(alpha: f64, l1_coeff: f64, which: u8) -> f64 {
    let x = match which {
        0 => return 0.0,
        1 => (1.0, 0.0),
        _ => (1.0, 1.0),
    };
    let (m, z) = case_loss(latent(alpha), x);
    m + l1_coeff * z
}

/// Grid point with the lowest total loss (first one on ties).
pub fn argmin(points: &[LossCurvePoint]) -> Option<LossCurvePoint> {
    points.iter().copied().fold(None, |best, p| match best {
        Some(b) if b.total <= p.total => Some(b),
        _ => Some(p),
    })
}

/// `steps + 1` evenly spaced points on `[0, 1]`.
pub fn unit_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

pub fn curve_table(points: &[LossCurvePoint]) -> Table {
    let mut t = Table::new(&["alpha", "total", "mse", "l1"]);
    for p in points {
        t.push(crate::csv_row![p.alpha, p.total, p.mse, p.l1]);
    }
    t
}
