//! Rank-constrained refinement of `E*` and read-out of global clusters.

use serde::{Deserialize, Serialize};

use super::GlobalGraph;
use crate::error::{Error, Result};
use crate::graph::{
    alternate, connected_components, simplex_project, ClusterAssignment, LearnedGraph,
    ObjectiveStep, PointSet, RankDiagnostics, RowRule, SpectralEmbedding, StructuralGraph,
};
use crate::kmeans::kmeans;
use crate::prototypes::{gaussian_of, CovarianceForm, Prototype, PrototypeSet};

/// Initial rank weight for refinement.
const REFINE_LAMBDA0: f64 = 1.0;
const KMEANS_RESTARTS: usize = 10;

/// Row rule `S_i = proj(E*_i - (lambda/2) d^f_i)` on the support of `E*_i`,
/// minimising `||S - E*||_F^2 + 2 lambda Tr(F^T L_S F)`.
struct ProjectionRule<'a> {
    target: &'a StructuralGraph,
}

impl RowRule for ProjectionRule<'_> {
    fn update(&self, i: usize, f: &SpectralEmbedding, lambda: f64) -> Result<Vec<(usize, f64)>> {
        let row = self.target.row(i);
        let v: Vec<f64> = row
            .iter()
            .map(|&(j, e)| e - 0.5 * lambda * f.row_sq_dist(i, j))
            .collect();
        let w = simplex_project(&v)?;
        Ok(row.iter().map(|e| e.0).zip(w).filter(|&(_, w)| w > 0.0).collect())
    }

    fn fit(&self, i: usize, row: &[(usize, f64)]) -> f64 {
        let target = self.target.row(i);
        let mut total = 0.0;
        let mut q = 0;
        for &(j, e) in target {
            while q < row.len() && row[q].0 < j {
                total += row[q].1 * row[q].1;
                q += 1;
            }
            let s = if q < row.len() && row[q].0 == j {
                q += 1;
                row[q - 1].1
            } else {
                0.0
            };
            total += (s - e) * (s - e);
        }
        total + row[q..].iter().map(|x| x.1 * x.1).sum::<f64>()
    }
}

/// Refines `E*` into `S` with exactly `c` connected components (best effort,
/// flagged in the diagnostics).
pub fn refine_global(e_star: &GlobalGraph, c: usize, max_iter: usize) -> Result<LearnedGraph> {
    if c == 0 || c >= e_star.total_n {
        return Err(Error::invalid(format!(
            "need 1 <= c < total_n, got c={c}, total_n={}",
            e_star.total_n
        )));
    }
    let rule = ProjectionRule {
        target: &e_star.graph,
    };
    alternate(e_star.graph.clone(), &rule, c, REFINE_LAMBDA0, max_iter)
}

/// Component labels when `s` has exactly `c` components, otherwise k-means
/// on the rows of `f`.
pub fn extract_global_clusters(
    s: &StructuralGraph,
    f: &SpectralEmbedding,
    c: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    if s.n() != f.n() {
        return Err(Error::invalid(format!(
            "graph has {} nodes but embedding has {} rows",
            s.n(),
            f.n()
        )));
    }
    let cc = connected_components(s);
    if cc.cluster_count == c {
        return Ok(cc);
    }
    log::debug!("{} components for {c} clusters; clustering the embedding", cc.cluster_count);
    let fit = kmeans(&f.to_point_set()?, c, KMEANS_RESTARTS, seed)?;
    Ok(ClusterAssignment::canonical(&fit.labels))
}

/// Per-cluster Gaussian over the given per-sample vectors. Empty clusters are
/// dropped and the remaining labels compacted; the returned assignment uses
/// the compacted labels.
pub fn compute_global_prototypes(
    vectors: &PointSet,
    assignments: &ClusterAssignment,
) -> Result<(PrototypeSet, ClusterAssignment)> {
    if vectors.rows() != assignments.len() {
        return Err(Error::invalid(format!(
            "{} vectors for {} assignments",
            vectors.rows(),
            assignments.len()
        )));
    }
    let mut members = vec![Vec::new(); assignments.cluster_count];
    for (i, &l) in assignments.labels.iter().enumerate() {
        members
            .get_mut(l)
            .ok_or_else(|| Error::invalid(format!("label {l} out of range")))?
            .push(i);
    }
    let empty = members.iter().filter(|m| m.is_empty()).count();
    if empty > 0 {
        log::warn!("{empty} global cluster(s) empty; feedback carries fewer prototypes");
    }
    let mut remap = vec![usize::MAX; members.len()];
    let mut next = 0;
    for (l, m) in members.iter().enumerate() {
        if !m.is_empty() {
            remap[l] = next;
            next += 1;
        }
    }
    let form = CovarianceForm::for_dim(vectors.dim());
    let n = vectors.rows() as f64;
    let prototypes = members
        .iter()
        .filter(|m| !m.is_empty())
        .map(|m| {
            let (mean, cov) = gaussian_of(vectors, m, form);
            Prototype::from_parts(&mean, &cov, m.len() as f64 / n)
        })
        .collect();
    let labels = assignments.labels.iter().map(|&l| remap[l]).collect();
    let mut compact = ClusterAssignment::new(labels, next);
    compact.provenance = assignments.provenance.clone();
    Ok((
        PrototypeSet {
            client_id: u32::MAX,
            dim: vectors.dim(),
            form,
            prototypes,
            noised: false,
            epsilon_spent: 0.0,
        },
        compact,
    ))
}

/// Everything the server produces in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalResult {
    pub similarity: StructuralGraph,
    pub embedding: SpectralEmbedding,
    pub assignments: ClusterAssignment,
    pub global_prototypes: PrototypeSet,
    pub diagnostics: RankDiagnostics,
    pub objective: Vec<ObjectiveStep>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{assemble_global, AssemblyConfig};
    use crate::graph::graph_laplacian;

    fn ring_rows(n: usize, off: usize) -> Vec<Vec<(usize, f64)>> {
        (0..n)
            .map(|i| vec![(off + (i + 1) % n, 0.5), (off + (i + n - 1) % n, 0.5)])
            .collect()
    }

    #[test]
    fn block_diagonal_input_is_kept() {
        let mut rows = ring_rows(6, 0);
        rows.extend(ring_rows(5, 6));
        let g = StructuralGraph::new(11, 2, rows).unwrap();
        let e = assemble_global(&[g.clone()], &[], &AssemblyConfig::default()).unwrap();
        let out = refine_global(&e, 2, 30).unwrap();
        assert!(out.diagnostics.converged);
        assert!(out.diagnostics.iterations <= 2);
        assert_eq!(connected_components(&out.graph).cluster_count, 2);
        let labels = extract_global_clusters(&out.graph, &out.embedding, 2, 0).unwrap();
        assert!(labels.labels[..6].iter().all(|&l| l == labels.labels[0]));
        assert!(labels.labels[6..].iter().all(|&l| l == labels.labels[6]));
        assert_ne!(labels.labels[0], labels.labels[6]);
    }

    #[test]
    fn weakly_linked_rings_are_split() {
        let n = 12;
        let mut rows = ring_rows(n, 0);
        rows.extend(ring_rows(n, n));
        for (a, b) in [(0, n), (5, n + 7)] {
            rows[a] = rows[a].iter().map(|&(c, w)| (c, w * 0.9)).collect();
            rows[a].push((b, 0.1));
        }
        let g = StructuralGraph::new(2 * n, 3, rows).unwrap();
        let e = assemble_global(&[g], &[], &AssemblyConfig::default()).unwrap();
        let out = refine_global(&e, 2, 40).unwrap();
        assert!(out.diagnostics.converged, "{:?}", out.diagnostics);
        let cc = connected_components(&out.graph);
        assert_eq!(cc.cluster_count, 2);
        assert!(cc.labels[..n].iter().all(|&l| l == cc.labels[0]));
        for step in &out.objective {
            assert!(step.after_e_step <= step.after_f_step + 1e-8);
        }
        for i in 0..out.graph.n() {
            let s: f64 = out.graph.row(i).iter().map(|x| x.1).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let lap = graph_laplacian(&out.graph);
        let trace = (out.embedding.matrix.transpose() * lap.mul_dense(&out.embedding.matrix)).trace();
        let sum: f64 = out.diagnostics.eigenvalues[..2].iter().sum();
        assert!((trace - sum).abs() < 1e-6);
    }

    #[test]
    fn kmeans_fallback_recovers_blobs_in_embedding() {
        let mut rows = Vec::new();
        for (k, c) in [(0.0, 0.0), (5.0, 0.0), (0.0, 5.0)].iter().enumerate() {
            for t in 0..10 {
                let jitter = 0.01 * t as f64;
                rows.push(vec![c.0 + jitter, c.1 - jitter, k as f64 * 0.0]);
            }
        }
        let f = SpectralEmbedding {
            matrix: PointSet::from_rows(&rows).unwrap().to_matrix(),
        };
        let g = StructuralGraph::new(30, 1, (0..30).map(|i| vec![((i + 1) % 30, 1.0)]).collect()).unwrap();
        let a = extract_global_clusters(&g, &f, 3, 7).unwrap();
        let b = extract_global_clusters(&g, &f, 3, 7).unwrap();
        assert_eq!(a, b);
        for k in 0..3 {
            assert!(a.labels[k * 10..(k + 1) * 10].iter().all(|&l| l == a.labels[k * 10]));
        }
        assert_eq!(a.cluster_count, 3);
    }

    #[test]
    fn global_prototypes_from_clusters() {
        let pts = PointSet::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![4.0, 0.0], vec![6.0, 0.0]]).unwrap();
        let (set, a) = compute_global_prototypes(&pts, &ClusterAssignment::new(vec![0, 0, 1, 1], 2)).unwrap();
        assert_eq!(set.prototypes[0].mean, vec![1.0, 1.0]);
        assert_eq!(set.prototypes[0].covariance, vec![1e-6, 0.0, 0.0, 1e-6]);
        assert_eq!(set.prototypes[1].mean, vec![5.0, 0.0]);
        let w: f64 = set.prototypes.iter().map(|p| p.weight).sum();
        assert!((w - 1.0).abs() < 1e-12);
        assert_eq!(a.cluster_count, 2);
    }

    #[test]
    fn empty_global_cluster_is_dropped() {
        let pts = PointSet::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let (set, a) = compute_global_prototypes(&pts, &ClusterAssignment::new(vec![0, 2, 2], 3)).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(a.labels, vec![0, 1, 1]);
        assert_eq!(a.cluster_count, 2);
    }
}
