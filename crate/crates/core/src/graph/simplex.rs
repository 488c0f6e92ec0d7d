//! Euclidean projection onto the probability simplex.

use crate::error::{Error, Result};

/// Nearest point (in L2) on `{x : x >= 0, sum x = 1}`.
///
/// Sort-and-threshold: find the largest `rho` with
/// `u_rho - (sum_{j<=rho} u_j - 1) / rho > 0` over the descending sort `u`,
/// then clip `v - theta` at zero.
pub fn simplex_project(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("cannot project an empty vector onto the simplex"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("simplex projection input is not finite"));
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // Re-normalise away the rounding left by the threshold.
    let s: f64 = out.iter().sum();
    if s > 0.0 {
        out.iter_mut().for_each(|x| *x /= s);
    }
    Ok(out)
}
