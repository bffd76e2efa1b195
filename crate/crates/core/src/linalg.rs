//! Small dense helpers shared by the basis generator and the subspace metrics.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

/// Relative tolerance on |R_ii| below which a row set is declared rank deficient.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("row set of {rows} vectors in R^{dims} is rank deficient (rank < {rows})")]
pub struct RankError {
    pub rows: usize,
    pub dims: usize,
}

/// Orthonormal basis (as rows) of the span of `rows`, via Householder QR.
///
/// Row `i` of the result spans the same flag as rows `0..=i` of the input.
pub fn orthonormal_rows(rows: ArrayView2<f64>) -> Result<Array2<f64>, RankError> {
    let (k, d) = rows.dim();
    if k == 0 {
        return Ok(Array2::zeros((0, d)));
    }
    if k > d {
        return Err(RankError { rows: k, dims: d });
    }
    // Columns of `m` are the input rows.
    let m = DMatrix::from_fn(d, k, |i, j| rows[[j, i]]);
    let qr = m.qr();
    let r = qr.r();
    let scale = rows
        .outer_iter()
        .map(|row| norm(row))
        .fold(0.0_f64, f64::max);
    if scale == 0.0 {
        return Err(RankError { rows: k, dims: d });
    }
    for i in 0..k {
        if r[(i, i)].abs() <= RANK_TOL * scale {
            return Err(RankError { rows: k, dims: d });
        }
    }
    let q = qr.q();
    // Fix signs so that each basis vector has positive overlap with its source row.
    Ok(Array2::from_shape_fn((k, d), |(j, i)| {
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        sign * q[(i, j)]
    }))
}

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

pub fn norm(a: ArrayView1<f64>) -> f64 {
    a.dot(&a).sqrt()
}

/// Euclidean norm of every row.
pub fn row_norms(m: ArrayView2<f64>) -> Vec<f64> {
    m.axis_iter(Axis(0)).map(norm).collect()
}

/// Rows scaled to unit norm; all-zero rows stay zero.
pub fn unit_rows(m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = norm(row.view());
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}
