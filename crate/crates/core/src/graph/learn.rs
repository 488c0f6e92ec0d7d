//! Alternating optimisation of a structural graph and its spectral
//! embedding under a Laplacian rank penalty.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::components::connected_components;
use super::eigen::c_smallest_eigvecs_warm;
use super::neighbors::{argsort, knn_row_solve, row_gamma, sq_dist};
use super::{
    graph_laplacian, simplex_project, PointSet, RankDiagnostics, SpectralEmbedding, StructuralGraph,
};
use crate::error::{Error, Result};

/// Graph change (Frobenius norm) below which the alternation is stable.
const STABLE_CHANGE: f64 = 1e-6;

/// Objective values around one E-step, at a fixed rank weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveStep {
    pub iteration: usize,
    pub lambda: f64,
    /// Objective after the embedding update, before the graph update.
    pub after_f_step: f64,
    /// Objective after the graph update.
    pub after_e_step: f64,
}

#[derive(Clone, Debug)]
pub struct LearnedGraph {
    pub graph: StructuralGraph,
    pub embedding: SpectralEmbedding,
    pub diagnostics: RankDiagnostics,
    pub objective: Vec<ObjectiveStep>,
}

/// `min(10, floor(n / c) - 1)` with a floor of 3, capped so that `k + 1 < n`.
pub fn default_neighbors(n: usize, c: usize) -> usize {
    let per_cluster = n / c.max(1);
    let k = 10.min(per_cluster.saturating_sub(1)).max(3);
    k.min(n.saturating_sub(2)).max(1)
}

/// Row update rule plugged into the alternation.
pub(crate) trait RowRule: Sync {
    /// New row `i` given the current embedding and rank weight.
    fn update(&self, i: usize, f: &SpectralEmbedding, lambda: f64) -> Result<Vec<(usize, f64)>>;

    /// Data-fit part of the objective for row `i` of `g`.
    fn fit(&self, i: usize, row: &[(usize, f64)]) -> f64;
}

/// `sum_i fit_i + lambda * sum_ij E_ij ||f_i - f_j||^2`, which equals the fit
/// plus `2 lambda Tr(F^T L_E F)`.
pub(crate) fn objective(
    rule: &dyn RowRule,
    g: &StructuralGraph,
    f: &SpectralEmbedding,
    lambda: f64,
) -> f64 {
    (0..g.n())
        .map(|i| {
            let row = g.row(i);
            let rank: f64 = row.iter().map(|&(j, w)| w * f.row_sq_dist(i, j)).sum();
            rule.fit(i, row) + lambda * rank
        })
        .sum()
}

/// Alternates spectral embedding and row updates, doubling the rank weight
/// while fewer than `c` eigenvalues vanish and halving it while more do.
pub(crate) fn alternate(
    initial: StructuralGraph,
    rule: &dyn RowRule,
    c: usize,
    lambda0: f64,
    max_iter: usize,
) -> Result<LearnedGraph> {
    let n = initial.n();
    let capacity = initial.row_capacity();
    let mut graph = initial;
    let mut lambda = lambda0;
    let mut warm: Option<DMatrix<f64>> = None;
    let mut trace = Vec::new();
    let mut change = f64::INFINITY;
    let mut exact: Option<(StructuralGraph, SpectralEmbedding, RankDiagnostics)> = None;
    let mut fallback: Option<(StructuralGraph, SpectralEmbedding, RankDiagnostics)> = None;
    let mut iteration = 0;

    loop {
        iteration += 1;
        let lap = graph_laplacian(&graph);
        let (emb, mut diag, full) = c_smallest_eigvecs_warm(&lap, c, warm.as_ref())?;
        warm = Some(full);
        let components = connected_components(&graph).cluster_count;
        diag.lambda = lambda;
        diag.iterations = iteration;
        diag.converged = diag.zero_count == c && components == c;
        log::debug!(
            "iteration {iteration}: lambda {lambda:.4e}, zero eigenvalues {}, components {components}, change {change:.3e}",
            diag.zero_count
        );
        if diag.converged {
            exact = Some((graph.clone(), emb.clone(), diag.clone()));
        } else if components == c {
            fallback = Some((graph.clone(), emb.clone(), diag.clone()));
        }
        let stable = diag.converged && change < STABLE_CHANGE;
        if stable || iteration > max_iter {
            let chosen = if diag.converged {
                (graph, emb, diag)
            } else if let Some(best) = exact.take() {
                best
            } else if let Some(best) = fallback.take() {
                best
            } else {
                (graph, emb, diag)
            };
            return Ok(LearnedGraph {
                graph: chosen.0,
                embedding: chosen.1,
                diagnostics: chosen.2,
                objective: trace,
            });
        }

        if diag.zero_count < c {
            lambda *= 2.0;
        } else if diag.zero_count > c {
            lambda *= 0.5;
        }

        let after_f_step = objective(rule, &graph, &emb, lambda);
        let rows = (0..n)
            .into_par_iter()
            .map(|i| rule.update(i, &emb, lambda))
            .collect::<Result<Vec<_>>>()?;
        let next = StructuralGraph::new(n, capacity, rows)?;
        let after_e_step = objective(rule, &next, &emb, lambda);
        trace.push(ObjectiveStep {
            iteration,
            lambda,
            after_f_step,
            after_e_step,
        });
        change = next.frobenius_sq_diff(&graph).sqrt();
        graph = next;
    }
}

/// Adaptive-neighbour row rule: each row minimises
/// `sum_j d^x_ij e_j + gamma_i e_j^2 + lambda d^f_ij e_j` over the simplex
/// restricted to its `k` nearest candidates.
struct NeighbourRule {
    pool: Vec<Vec<usize>>,
    dx: Vec<Vec<f64>>,
    gamma: Vec<f64>,
}

impl RowRule for NeighbourRule {
    fn update(&self, i: usize, f: &SpectralEmbedding, lambda: f64) -> Result<Vec<(usize, f64)>> {
        let scale = -0.5 / self.gamma[i];
        let target: Vec<f64> = self.pool[i]
            .iter()
            .zip(&self.dx[i])
            .map(|(&j, &d)| scale * (d + lambda * f.row_sq_dist(i, j)))
            .collect();
        let w = simplex_project(&target)?;
        Ok(self.pool[i].iter().copied().zip(w).filter(|&(_, w)| w > 0.0).collect())
    }

    fn fit(&self, i: usize, row: &[(usize, f64)]) -> f64 {
        let pool = &self.pool[i];
        row.iter()
            .map(|&(j, w)| {
                let d = pool
                    .iter()
                    .position(|&p| p == j)
                    .map_or(0.0, |p| self.dx[i][p]);
                d * w + self.gamma[i] * w * w
            })
            .sum()
    }
}

/// `k + 1` nearest neighbours of every point (self excluded), ties by index.
fn neighbour_lists(points: &PointSet, m: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let n = points.rows();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let a = points.row(i);
            let mut d: Vec<f64> = (0..n).map(|j| sq_dist(a, points.row(j))).collect();
            d[i] = f64::INFINITY;
            let order = argsort(&d);
            let idx: Vec<usize> = order[..m].to_vec();
            let ds = idx.iter().map(|&j| d[j]).collect();
            (idx, ds)
        })
        .collect()
}

fn check_sizes(points: &PointSet, c: usize, k: usize) -> Result<()> {
    let n = points.rows();
    if c == 0 || c >= n {
        return Err(Error::invalid(format!("need 1 <= c < n, got c={c}, n={n}")));
    }
    if k == 0 || k + 1 >= n {
        return Err(Error::invalid(format!("need 1 <= k and k + 1 < n, got k={k}, n={n}")));
    }
    Ok(())
}

/// Closed-form `k`-neighbour rows from lists holding at least `k + 1`
/// sorted neighbours.
fn start_rows(lists: &[(Vec<usize>, Vec<f64>)], k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    lists
        .iter()
        .map(|(idx, ds)| {
            let w = knn_row_solve(&ds[..k + 1], k)?;
            Ok(idx[..k].iter().copied().zip(w).filter(|&(_, w)| w > 0.0).collect())
        })
        .collect()
}

/// Plain `k`-nearest-neighbour graph from the closed-form row solution,
/// without any rank constraint.
pub fn plain_knn_graph(points: &PointSet, k: usize) -> Result<StructuralGraph> {
    check_sizes(points, 1, k)?;
    let lists = neighbour_lists(points, k + 1);
    let rows = lists
        .into_iter()
        .map(|(idx, ds)| {
            let w = knn_row_solve(&ds, k)?;
            Ok(idx.into_iter().zip(w).filter(|&(_, w)| w > 0.0).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    StructuralGraph::new(points.rows(), k, rows)
}

/// Learns a row-stochastic sparse graph over `points` whose Laplacian has
/// `c` zero eigenvalues. The rank penalty can split components but never
/// join them, so when the `k`-NN start has more than `c` components `k` is
/// raised (up to `2k`) until it does not; the graph's row capacity records
/// the `k` used. Failure to reach exactly `c` components is reported through
/// `diagnostics.converged` rather than as an error.
pub fn learn_private_graph(
    points: &PointSet,
    c: usize,
    k: usize,
    max_iter: usize,
) -> Result<LearnedGraph> {
    check_sizes(points, c, k)?;
    let check_k = k;
    let n = points.rows();
    let k_cap = (2 * k).min(n - 2).max(k);
    let lists = neighbour_lists(points, k_cap + 1);
    let mut k = k;
    let mut rows = start_rows(&lists, k)?;
    while k < k_cap && connected_components(&StructuralGraph::new(n, k, rows.clone())?).cluster_count > c {
        k += 1;
        rows = start_rows(&lists, k)?;
    }
    if k > check_k {
        log::debug!("raised k from {check_k} to {k} to start from at most {c} components");
    }
    let mut gamma = Vec::with_capacity(n);
    let mut pool = Vec::with_capacity(n);
    let mut dx = Vec::with_capacity(n);
    for (idx, ds) in &lists {
        gamma.push(row_gamma(&ds[..k + 1], k)?);
        pool.push(idx[..k].to_vec());
        dx.push(ds[..k].to_vec());
    }
    let positive: Vec<f64> = gamma.iter().copied().filter(|&g| g > 0.0).collect();
    let mean_gamma = if positive.is_empty() {
        1.0
    } else {
        positive.iter().sum::<f64>() / positive.len() as f64
    };
    for g in gamma.iter_mut() {
        if *g <= 0.0 {
            *g = mean_gamma;
        }
    }
    let initial = StructuralGraph::new(n, k, rows)?;
    let rule = NeighbourRule { pool, dx, gamma };
    alternate(initial, &rule, c, mean_gamma, max_iter)
}

/// Rank diagnostics of an arbitrary graph for a target of `c` components.
pub fn rank_diagnostics(g: &StructuralGraph, c: usize) -> Result<RankDiagnostics> {
    let lap = graph_laplacian(g);
    let (_, mut diag, _) = c_smallest_eigvecs_warm(&lap, c, None)?;
    diag.converged = diag.zero_count == c && connected_components(g).cluster_count == c;
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(per: usize, centers: &[(f64, f64)], sd: f64, seed: u64) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        let rows: Vec<Vec<f64>> = centers
            .iter()
            .flat_map(|&(x, y)| (0..per).map(move |_| (x, y)))
            .map(|(x, y)| vec![x + noise.sample(&mut rng), y + noise.sample(&mut rng)])
            .collect();
        PointSet::from_rows(&rows).unwrap()
    }

    #[test]
    fn default_neighbors_rule() {
        assert_eq!(default_neighbors(1000, 2), 10);
        assert_eq!(default_neighbors(20, 4), 4);
        assert_eq!(default_neighbors(8, 4), 3);
        assert_eq!(default_neighbors(4, 1), 2);
    }

    #[test]
    fn two_blobs_give_two_components() {
        let pts = blobs(30, &[(0.0, 0.0), (8.0, 8.0)], 0.5, 3);
        let out = learn_private_graph(&pts, 2, 5, 30).unwrap();
        let cc = connected_components(&out.graph);
        assert_eq!(cc.cluster_count, 2);
        assert!(out.diagnostics.converged);
        assert_eq!(out.diagnostics.zero_count, 2);
        assert!(cc.labels[..30].iter().all(|&l| l == cc.labels[0]));
        assert!(cc.labels[30..].iter().all(|&l| l == cc.labels[30]));
    }

    #[test]
    fn single_cluster_converges() {
        let pts = blobs(25, &[(0.0, 0.0)], 1.0, 4);
        let out = learn_private_graph(&pts, 1, 5, 30).unwrap();
        assert!(out.diagnostics.converged);
        assert_eq!(connected_components(&out.graph).cluster_count, 1);
    }

    #[test]
    fn objective_never_increases_at_fixed_lambda() {
        let pts = blobs(20, &[(0.0, 0.0), (3.0, 0.0), (0.0, 3.0)], 0.8, 5);
        let out = learn_private_graph(&pts, 3, 6, 30).unwrap();
        assert!(!out.objective.is_empty());
        for step in &out.objective {
            assert!(step.after_e_step <= step.after_f_step + 1e-8, "{step:?}");
        }
        for pair in out.objective.windows(2) {
            if pair[0].lambda == pair[1].lambda {
                assert!(pair[1].after_f_step <= pair[0].after_e_step + 1e-8, "{pair:?}");
            }
        }
    }

    #[test]
    fn rows_stay_stochastic_and_sparse() {
        let pts = blobs(15, &[(0.0, 0.0), (5.0, 0.0)], 1.0, 6);
        let out = learn_private_graph(&pts, 2, 4, 30).unwrap();
        for i in 0..out.graph.n() {
            let row = out.graph.row(i);
            assert!(row.len() <= 4);
            let s: f64 = row.iter().map(|e| e.1).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(out.embedding.orthonormality_error() < 1e-6);
    }

    #[test]
    fn plain_knn_rows_match_closed_form() {
        let pts = blobs(10, &[(0.0, 0.0)], 1.0, 7);
        let g = plain_knn_graph(&pts, 3).unwrap();
        for i in 0..g.n() {
            assert!(g.row(i).len() <= 3);
            assert!((g.row(i).iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_too_many_neighbours() {
        let pts = blobs(3, &[(0.0, 0.0)], 1.0, 8);
        assert!(learn_private_graph(&pts, 1, 2, 10).is_err());
        assert!(learn_private_graph(&pts, 3, 1, 10).is_err());
    }
}
