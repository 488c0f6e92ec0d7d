//! Lloyd's k-means with k-means++ seeding and seeded restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::PointSet;

const MAX_LLOYD_ITER: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    /// `k` centres, one row each.
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first centre uniform, the rest proportional to the
/// squared distance to the nearest chosen centre.
pub fn kmeanspp_init(points: &PointSet, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut centers = vec![points.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = points.iter_rows().map(|p| sq(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points.row(pick).to_vec();
        for (i, p) in points.iter_rows().enumerate() {
            nearest[i] = nearest[i].min(sq(p, &c));
        }
        centers.push(c);
    }
    centers
}

fn assign(points: &PointSet, centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .iter_rows()
        .map(|p| {
            centers
                .iter()
                .enumerate()
                .map(|(j, c)| (j, sq(p, c)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
        })
        .unzip()
}

fn lloyd(points: &PointSet, mut centers: Vec<Vec<f64>>) -> KMeansFit {
    let k = centers.len();
    let d = points.dim();
    let (mut labels, mut dists) = assign(points, &centers);
    for _ in 0..MAX_LLOYD_ITER {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter_rows().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = dists
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0;
                centers[j] = points.row(far).to_vec();
                dists[far] = 0.0;
            } else {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let (next, next_d) = assign(points, &centers);
        let stable = next == labels;
        labels = next;
        dists = next_d;
        if stable {
            break;
        }
    }
    KMeansFit {
        labels,
        centers,
        inertia: dists.iter().sum(),
    }
}

/// Best of `restarts` k-means runs by inertia. Each restart draws its own
/// k-means++ seeding from one seeded stream.
pub fn kmeans(points: &PointSet, k: usize, restarts: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 || k > points.rows() {
        return Err(Error::invalid(format!(
            "k-means needs 1 <= k <= n, got k={k}, n={}",
            points.rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..restarts.max(1) {
        let fit = lloyd(points, kmeanspp_init(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Index of the nearest centre for every point.
pub fn nearest_center(points: &PointSet, centers: &[Vec<f64>]) -> Vec<usize> {
    assign(points, centers).0
}
