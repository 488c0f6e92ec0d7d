//! Pairwise distances and the closed-form adaptive-neighbour row solution.

use super::PointSet;
use crate::error::{Error, Result};

/// Full `N x N` matrix of squared Euclidean distances, row-major.
pub fn pairwise_sq_dists(points: &PointSet) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        let a = points.row(i);
        for j in (i + 1)..n {
            let d = sq_dist(a, points.row(j));
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    out
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-row regulariser `gamma_i = (k/2) d_{k+1} - (1/2) sum_{j<=k} d_j` for an
/// ascending list of neighbour distances (self excluded).
pub fn row_gamma(sorted: &[f64], k: usize) -> Result<f64> {
    if k == 0 || sorted.len() < k + 1 {
        return Err(Error::invalid(format!(
            "need at least k+1 = {} sorted distances, got {}",
            k + 1,
            sorted.len()
        )));
    }
    let head: f64 = sorted[..k].iter().sum();
    Ok(0.5 * k as f64 * sorted[k] - 0.5 * head)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaEstimate {
    pub per_row: Vec<f64>,
    pub mean: f64,
}

pub fn estimate_gamma(sorted_rows: &[Vec<f64>], k: usize) -> Result<GammaEstimate> {
    if sorted_rows.is_empty() {
        return Err(Error::invalid("no rows to estimate gamma from"));
    }
    let per_row = sorted_rows
        .iter()
        .map(|r| row_gamma(r, k))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_row.iter().sum::<f64>() / per_row.len() as f64;
    Ok(GammaEstimate { per_row, mean })
}

/// Indices of `dists` in ascending order, ties broken by index.
pub(crate) fn argsort(dists: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dists.len()).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    order
}

/// Closed-form optimal row of an adaptive-neighbour graph with exactly `k`
/// neighbours: `w_j = (d_{k+1} - d_j) / (k d_{k+1} - sum_{h<=k} d_h)` on the
/// `k` nearest candidates, zero elsewhere. Falls back to uniform `1/k` when
/// the `k+1` nearest distances are all equal.
pub fn knn_row_solve(dists: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || dists.len() < k + 1 {
        return Err(Error::invalid(format!(
            "knn row solve needs k+1 = {} candidates, got {}",
            k + 1,
            dists.len()
        )));
    }
    if dists.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("non-finite distance in knn row"));
    }
    let order = argsort(dists);
    let mut weights = vec![0.0; dists.len()];
    let d_next = dists[order[k]];
    let head: f64 = order[..k].iter().map(|&j| dists[j]).sum();
    let denom = k as f64 * d_next - head;
    if denom <= f64::EPSILON * (k as f64 * d_next.abs()).max(f64::MIN_POSITIVE) {
        for &j in &order[..k] {
            weights[j] = 1.0 / k as f64;
        }
    } else {
        for &j in &order[..k] {
            weights[j] = ((d_next - dists[j]) / denom).max(0.0);
        }
    }
    Ok(weights)
}
