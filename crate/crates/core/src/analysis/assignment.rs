//! Maximum-weight bipartite assignment (Hungarian algorithm with potentials).

use ndarray::ArrayView2;

/// Assigns each row to a distinct column maximising the total weight.
///
/// With more rows than columns, the surplus rows get `None`. Runs in
/// `O(n^2 m)` for `n = min(rows, cols)`, `m = max(rows, cols)`.
pub fn max_weight_assignment(weights: ArrayView2<f64>) -> Vec<Option<usize>> {
    let (r, c) = weights.dim();
    if r == 0 || c == 0 {
        return vec![None; r];
    }
    if r <= c {
        let rows = min_cost_rows(r, c, |i, j| -weights[[i, j]]);
        rows.into_iter().map(Some).collect()
    } else {
        let cols = min_cost_rows(c, r, |i, j| -weights[[j, i]]);
        let mut out = vec![None; r];
        for (j, i) in cols.into_iter().enumerate() {
            out[i] = Some(j);
        }
        out
    }
}

/// Minimum-cost assignment of `n` rows into `m >= n` columns; returns the column of each row.
fn min_cost_rows(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based potentials; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            rows[p[j] - 1] = j - 1;
        }
    }
    rows
}
