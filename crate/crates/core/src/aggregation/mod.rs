//! Server-side aggregation: prototype affinities between clients, assembly of
//! the global block graph, and its rank-constrained refinement.

mod refine;

pub use refine::{compute_global_prototypes, extract_global_clusters, refine_global, GlobalResult};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::StructuralGraph;
use crate::prototypes::{Prototype, PrototypeSet};

/// `KL(p || q)` between two Gaussians.
pub fn gaussian_kl(p: &Prototype, q: &Prototype) -> Result<f64> {
    let d = p.dim();
    if q.dim() != d {
        return Err(Error::invalid(format!("prototype dimensions differ: {d} vs {}", q.dim())));
    }
    let sp = p.cov_matrix();
    let sq = q.cov_matrix();
    let chol_q = sq
        .cholesky()
        .ok_or_else(|| Error::numeric("covariance of the second prototype is singular"))?;
    let chol_p = sp
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numeric("covariance of the first prototype is singular"))?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = chol_q.solve(&sp).trace();
    let diff = q.mean_vector() - p.mean_vector();
    let maha = diff.dot(&chol_q.solve(&diff));
    let kl = 0.5 * (trace + maha - d as f64 + logdet(&chol_q.l()) - logdet(&chol_p.l()));
    if !kl.is_finite() {
        return Err(Error::numeric("KL divergence is not finite"));
    }
    Ok(kl.max(0.0))
}

/// `(KL(p||q) + KL(q||p)) / 2`.
pub fn symmetric_kl(p: &Prototype, q: &Prototype) -> Result<f64> {
    Ok(0.5 * (gaussian_kl(p, q)? + gaussian_kl(q, p)?))
}

/// Affinity block between the samples of client `i` (rows) and client `j`
/// (columns). Entry `(m, n)` is `exp(-KL_sym)` between the prototypes of the
/// two samples' local clusters, so the block is constant on every
/// cluster-by-cluster rectangle and only the cluster-level matrix is stored.
#[derive(Clone, Debug, PartialEq)]
pub struct InterClientBlock {
    pub i: usize,
    pub j: usize,
    pub affinity: DMatrix<f64>,
    pub labels_i: Vec<usize>,
    pub labels_j: Vec<usize>,
}

impl InterClientBlock {
    pub fn rows(&self) -> usize {
        self.labels_i.len()
    }

    pub fn cols(&self) -> usize {
        self.labels_j.len()
    }

    pub fn entry(&self, m: usize, n: usize) -> f64 {
        self.affinity[(self.labels_i[m], self.labels_j[n])]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows(), self.cols(), |m, n| self.entry(m, n))
    }

    pub fn transposed(&self) -> Self {
        Self {
            i: self.j,
            j: self.i,
            affinity: self.affinity.transpose(),
            labels_i: self.labels_j.clone(),
            labels_j: self.labels_i.clone(),
        }
    }
}

/// Builds the block between two clients from their released prototypes and
/// local labels only.
pub fn inter_client_block(
    (i, protos_i, assign_i): (usize, &PrototypeSet, &[usize]),
    (j, protos_j, assign_j): (usize, &PrototypeSet, &[usize]),
) -> Result<InterClientBlock> {
    for (who, protos, labels) in [(i, protos_i, assign_i), (j, protos_j, assign_j)] {
        if let Some(&bad) = labels.iter().find(|&&l| l >= protos.len()) {
            return Err(Error::invalid(format!(
                "client {who} label {bad} has no prototype ({} released)",
                protos.len()
            )));
        }
    }
    let mut affinity = DMatrix::zeros(protos_i.len(), protos_j.len());
    for (a, p) in protos_i.prototypes.iter().enumerate() {
        for (b, q) in protos_j.prototypes.iter().enumerate() {
            let kl = symmetric_kl(p, q).map_err(|e| {
                Error::numeric(format!("prototypes ({i}:{a}) and ({j}:{b}): {e}"))
            })?;
            affinity[(a, b)] = (-kl).exp();
        }
    }
    Ok(InterClientBlock {
        i,
        j,
        affinity,
        labels_i: assign_i.to_vec(),
        labels_j: assign_j.to_vec(),
    })
}

/// Knobs for [`assemble_global`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssemblyConfig {
    /// Weight of the inter-client blocks.
    pub beta: f64,
    /// Entries kept per row of each inter-client block.
    pub inter_block_k: usize,
    /// Inter-client blocks are kept dense when the total sample count is at
    /// most this.
    pub dense_limit: usize,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            inter_block_k: 5,
            dense_limit: 500,
        }
    }
}

/// Where one block of the global matrix sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLocation {
    pub client_i: usize,
    pub client_j: usize,
    pub row_start: usize,
    pub col_start: usize,
    pub rows: usize,
    pub cols: usize,
}

/// The assembled global graph `E*` in three stages: the raw block layout,
/// its symmetrisation, and the row-normalised matrix handed to refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalGraph {
    pub total_n: usize,
    pub client_offsets: Vec<usize>,
    pub client_sizes: Vec<usize>,
    /// Private graphs on the diagonal, sparsified inter-client blocks off it.
    pub raw: StructuralGraph,
    /// `(raw + raw^T) / 2`.
    pub symmetric: StructuralGraph,
    /// `symmetric` with every row divided by its sum.
    pub graph: StructuralGraph,
    pub block_index: Vec<BlockLocation>,
}

impl GlobalGraph {
    /// Client `k`'s diagonal block of the raw layout, in local indices.
    pub fn diagonal_block(&self, k: usize) -> Vec<Vec<(usize, f64)>> {
        let (start, size) = (self.client_offsets[k], self.client_sizes[k]);
        (start..start + size)
            .map(|r| {
                self.raw
                    .row(r)
                    .iter()
                    .filter(|&&(c, _)| c >= start && c < start + size)
                    .map(|&(c, w)| (c - start, w))
                    .collect()
            })
            .collect()
    }

    /// Client owning global row `r`.
    pub fn client_of(&self, r: usize) -> usize {
        self.client_offsets.partition_point(|&o| o <= r) - 1
    }
}

/// Columns picked for one row of a sparsified block: the best-matching
/// cluster first (ties by cluster index), filled cyclically from an offset
/// that spreads in-degree across that cluster's members.
fn top_columns(
    block: &InterClientBlock,
    row_cluster: usize,
    rank_in_cluster: usize,
    members_j: &[Vec<usize>],
    k: usize,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..block.affinity.ncols()).collect();
    order.sort_by(|&a, &b| {
        block.affinity[(row_cluster, b)]
            .total_cmp(&block.affinity[(row_cluster, a)])
            .then(a.cmp(&b))
    });
    let mut picked = Vec::with_capacity(k);
    for b in order {
        if block.affinity[(row_cluster, b)] <= 0.0 {
            break;
        }
        let members = &members_j[b];
        if members.is_empty() {
            continue;
        }
        let take = (k - picked.len()).min(members.len());
        let start = (rank_in_cluster * k) % members.len();
        picked.extend((0..take).map(|t| members[(start + t) % members.len()]));
        if picked.len() == k {
            break;
        }
    }
    picked
}

/// Assembles `E*` from the private graphs (diagonal) and the inter-client
/// blocks (off-diagonal, scaled by `beta` and sparsified to
/// `inter_block_k` entries per row unless the problem is small), then
/// symmetrises and row-normalises.
pub fn assemble_global(
    private_graphs: &[StructuralGraph],
    blocks: &[InterClientBlock],
    cfg: &AssemblyConfig,
) -> Result<GlobalGraph> {
    let m = private_graphs.len();
    if m == 0 {
        return Err(Error::invalid("no private graphs to assemble"));
    }
    let client_sizes: Vec<usize> = private_graphs.iter().map(StructuralGraph::n).collect();
    let mut client_offsets = Vec::with_capacity(m);
    let mut total_n = 0;
    for &s in &client_sizes {
        client_offsets.push(total_n);
        total_n += s;
    }
    let dense = total_n <= cfg.dense_limit;

    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(total_n);
    for (k, g) in private_graphs.iter().enumerate() {
        let off = client_offsets[k];
        rows.extend(g.rows().iter().map(|r| r.iter().map(|&(c, w)| (c + off, w)).collect()));
    }
    let mut block_index: Vec<BlockLocation> = (0..m)
        .map(|k| BlockLocation {
            client_i: k,
            client_j: k,
            row_start: client_offsets[k],
            col_start: client_offsets[k],
            rows: client_sizes[k],
            cols: client_sizes[k],
        })
        .collect();

    if cfg.beta > 0.0 {
        for block in blocks {
            let (i, j) = (block.i, block.j);
            if i >= m || j >= m || i == j {
                return Err(Error::invalid(format!("block ({i}, {j}) does not address two distinct clients")));
            }
            if block.rows() != client_sizes[i] || block.cols() != client_sizes[j] {
                return Err(Error::invalid(format!(
                    "block ({i}, {j}) is {}x{}, clients have {} and {} samples",
                    block.rows(),
                    block.cols(),
                    client_sizes[i],
                    client_sizes[j]
                )));
            }
            let (ri, cj) = (client_offsets[i], client_offsets[j]);
            block_index.push(BlockLocation {
                client_i: i,
                client_j: j,
                row_start: ri,
                col_start: cj,
                rows: block.rows(),
                cols: block.cols(),
            });
            if dense {
                for r in 0..block.rows() {
                    rows[ri + r].extend(
                        (0..block.cols())
                            .map(|c| (cj + c, cfg.beta * block.entry(r, c)))
                            .filter(|&(_, w)| w > 0.0),
                    );
                }
                continue;
            }
            let mut members_j = vec![Vec::new(); block.affinity.ncols()];
            for (c, &l) in block.labels_j.iter().enumerate() {
                members_j[l].push(c);
            }
            let mut seen = vec![0usize; block.affinity.nrows()];
            for r in 0..block.rows() {
                let a = block.labels_i[r];
                let cols = top_columns(block, a, seen[a], &members_j, cfg.inter_block_k);
                seen[a] += 1;
                rows[ri + r].extend(cols.into_iter().map(|c| (cj + c, cfg.beta * block.entry(r, c))));
            }
        }
    }
    let capacity = rows.iter().map(Vec::len).max().unwrap_or(0);
    let raw = StructuralGraph::new_unnormalized(total_n, capacity, rows)?;

    let mut sym_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); total_n];
    for r in 0..total_n {
        for &(c, w) in raw.row(r) {
            sym_rows[r].push((c, 0.5 * w));
            sym_rows[c].push((r, 0.5 * w));
        }
    }
    for row in sym_rows.iter_mut() {
        row.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for &(c, w) in row.iter() {
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += w,
                _ => merged.push((c, w)),
            }
        }
        *row = merged;
    }
    let capacity = sym_rows.iter().map(Vec::len).max().unwrap_or(0);
    let symmetric = StructuralGraph::new_unnormalized(total_n, capacity, sym_rows.clone())?;
    for (r, row) in sym_rows.iter_mut().enumerate() {
        let sum: f64 = row.iter().map(|e| e.1).sum();
        if sum <= 0.0 {
            return Err(Error::invalid(format!("global row {r} has no edges")));
        }
        for e in row.iter_mut() {
            e.1 /= sum;
        }
    }
    let graph = StructuralGraph::new(total_n, capacity, sym_rows)?;
    Ok(GlobalGraph {
        total_n,
        client_offsets,
        client_sizes,
        raw,
        symmetric,
        graph,
        block_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::CovarianceForm;

    fn proto(mean: &[f64], cov_diag: &[f64]) -> Prototype {
        let d = mean.len();
        let mut covariance = vec![0.0; d * d];
        for k in 0..d {
            covariance[k * d + k] = cov_diag[k];
        }
        Prototype {
            mean: mean.to_vec(),
            covariance,
            weight: 1.0,
        }
    }

    fn set(protos: Vec<Prototype>) -> PrototypeSet {
        let dim = protos[0].dim();
        let w = 1.0 / protos.len() as f64;
        PrototypeSet {
            client_id: 0,
            dim,
            form: CovarianceForm::Full,
            prototypes: protos.into_iter().map(|p| Prototype { weight: w, ..p }).collect(),
            noised: false,
            epsilon_spent: 0.0,
        }
    }

    #[test]
    fn kl_hand_values() {
        let a = proto(&[0.0], &[1.0]);
        assert_eq!(gaussian_kl(&a, &a).unwrap(), 0.0);
        let b = proto(&[1.0], &[1.0]);
        assert!((gaussian_kl(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        let wide = proto(&[0.0], &[4.0]);
        let expected = 0.5 * (4.0 - 1.0 + (0.25f64).ln());
        assert!((gaussian_kl(&wide, &a).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn kl_matches_monte_carlo_in_2d() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let p = Prototype {
            mean: vec![0.3, -0.2],
            covariance: vec![1.0, 0.3, 0.3, 0.5],
            weight: 1.0,
        };
        let q = Prototype {
            mean: vec![-0.1, 0.4],
            covariance: vec![0.8, -0.2, -0.2, 1.2],
            weight: 1.0,
        };
        let logpdf = |x: &nalgebra::DVector<f64>, g: &Prototype| {
            let s = g.cov_matrix();
            let det = s.determinant();
            let diff = x - g.mean_vector();
            let inv = s.try_inverse().unwrap();
            -0.5 * (diff.dot(&(inv * &diff)) + det.ln() + 2.0 * (2.0 * std::f64::consts::PI).ln())
        };
        let chol = p.cov_matrix().cholesky().unwrap().l();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = nalgebra::DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            let x = p.mean_vector() + &chol * z;
            acc += logpdf(&x, &p) - logpdf(&x, &q);
        }
        let mc = acc / n as f64;
        assert!((gaussian_kl(&p, &q).unwrap() - mc).abs() < 0.01);
    }

    #[test]
    fn singular_covariance_is_a_numeric_error() {
        let a = proto(&[0.0, 0.0], &[1.0, 1.0]);
        let bad = proto(&[0.0, 0.0], &[1.0, 0.0]);
        assert!(matches!(gaussian_kl(&a, &bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn identical_prototypes_give_all_ones_block() {
        let s = set(vec![proto(&[1.0, 2.0], &[0.5, 0.5]), proto(&[1.0, 2.0], &[0.5, 0.5])]);
        let block = inter_client_block((0, &s, &[0, 1, 1]), (1, &s, &[1, 0])).unwrap();
        assert!(block.to_dense().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn one_cluster_each_gives_constant_block() {
        let a = set(vec![proto(&[0.0], &[1.0])]);
        let b = set(vec![proto(&[1.0], &[1.0])]);
        let block = inter_client_block((0, &a, &[0, 0, 0]), (1, &b, &[0, 0])).unwrap();
        let expected = (-0.5f64).exp();
        assert!(block.to_dense().iter().all(|&v| (v - expected).abs() < 1e-12));
        assert!((expected - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn swapping_clients_transposes_block() {
        let a = set(vec![proto(&[0.0], &[1.0]), proto(&[3.0], &[2.0])]);
        let b = set(vec![proto(&[0.5], &[1.5]), proto(&[2.0], &[0.5]), proto(&[-1.0], &[1.0])]);
        let la = [0, 1, 1, 0];
        let lb = [2, 0, 1];
        let ab = inter_client_block((0, &a, &la), (1, &b, &lb)).unwrap();
        let ba = inter_client_block((1, &b, &lb), (0, &a, &la)).unwrap();
        assert_eq!(ab.to_dense().transpose(), ba.to_dense());
        assert_eq!(ab.transposed(), ba);
    }

    #[test]
    fn label_without_prototype_is_rejected() {
        let a = set(vec![proto(&[0.0], &[1.0])]);
        assert!(inter_client_block((0, &a, &[0, 1]), (1, &a, &[0])).is_err());
    }

    fn pair_graphs() -> (StructuralGraph, StructuralGraph) {
        let g1 = StructuralGraph::new(
            3,
            2,
            vec![vec![(1, 0.5), (2, 0.5)], vec![(0, 1.0)], vec![(0, 0.25), (1, 0.75)]],
        )
        .unwrap();
        let g2 = StructuralGraph::new(2, 1, vec![vec![(1, 1.0)], vec![(0, 1.0)]]).unwrap();
        (g1, g2)
    }

    fn pair_blocks(g1: &StructuralGraph, g2: &StructuralGraph) -> Vec<InterClientBlock> {
        let a = set(vec![proto(&[0.0], &[1.0])]);
        let b = set(vec![proto(&[1.0], &[1.0])]);
        let la = vec![0; g1.n()];
        let lb = vec![0; g2.n()];
        let ab = inter_client_block((0, &a, &la), (1, &b, &lb)).unwrap();
        vec![ab.clone(), ab.transposed()]
    }

    #[test]
    fn diagonal_blocks_are_the_private_graphs() {
        let (g1, g2) = pair_graphs();
        let blocks = pair_blocks(&g1, &g2);
        let e = assemble_global(&[g1.clone(), g2.clone()], &blocks, &AssemblyConfig::default()).unwrap();
        assert_eq!(e.total_n, 5);
        assert_eq!(e.client_offsets, vec![0, 3]);
        assert_eq!(e.diagonal_block(0), g1.rows().to_vec());
        assert_eq!(e.diagonal_block(1), g2.rows().to_vec());
        assert_eq!(e.client_of(4), 1);
        assert_eq!(e.block_index.len(), 4);
    }

    #[test]
    fn symmetrised_stage_is_symmetric_and_rows_normalised() {
        let (g1, g2) = pair_graphs();
        let blocks = pair_blocks(&g1, &g2);
        let e = assemble_global(&[g1, g2], &blocks, &AssemblyConfig::default()).unwrap();
        let s = e.symmetric.to_dense();
        assert!((&s - s.transpose()).amax() < 1e-12);
        for r in 0..e.total_n {
            let sum: f64 = e.graph.row(r).iter().map(|x| x.1).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_beta_keeps_clients_apart() {
        let (g1, g2) = pair_graphs();
        let blocks = pair_blocks(&g1, &g2);
        let cfg = AssemblyConfig {
            beta: 0.0,
            ..AssemblyConfig::default()
        };
        let e = assemble_global(&[g1, g2], &blocks, &cfg).unwrap();
        let cc = crate::graph::connected_components(&e.graph);
        assert!(cc.cluster_count >= 2);
        assert!(cc.labels[..3].iter().all(|l| !cc.labels[3..].contains(l)));
    }

    #[test]
    fn sparse_blocks_respect_budget() {
        let n1 = 300;
        let n2 = 260;
        let ring = |n: usize| {
            StructuralGraph::new(n, 2, (0..n).map(|i| vec![((i + 1) % n, 0.5), ((i + n - 1) % n, 0.5)]).collect())
                .unwrap()
        };
        let (g1, g2) = (ring(n1), ring(n2));
        let a = set(vec![proto(&[0.0], &[1.0]), proto(&[2.0], &[1.0])]);
        let b = set(vec![proto(&[0.1], &[1.0]), proto(&[2.1], &[1.0])]);
        let la: Vec<usize> = (0..n1).map(|i| i % 2).collect();
        let lb: Vec<usize> = (0..n2).map(|i| (i / 7) % 2).collect();
        let ab = inter_client_block((0, &a, &la), (1, &b, &lb)).unwrap();
        let blocks = vec![ab.clone(), ab.transposed()];
        let cfg = AssemblyConfig::default();
        let e = assemble_global(&[g1.clone(), g2.clone()], &blocks, &cfg).unwrap();
        let bound = g1.nnz() + g2.nnz() + (n1 + n2) * cfg.inter_block_k;
        assert!(e.raw.nnz() <= bound);
        for r in 0..n1 {
            let picked: Vec<usize> = e.raw.row(r).iter().filter(|x| x.0 >= n1).map(|x| lb[x.0 - n1]).collect();
            assert_eq!(picked.len(), 5);
            assert!(picked.iter().all(|&l| l == la[r]));
        }
    }

    #[test]
    fn shape_mismatch_names_clients() {
        let (g1, g2) = pair_graphs();
        let mut blocks = pair_blocks(&g1, &g2);
        blocks[0].labels_i.pop();
        let err = assemble_global(&[g1, g2], &blocks, &AssemblyConfig::default()).unwrap_err();
        assert!(err.to_string().contains("block (0, 1)"));
    }
}
