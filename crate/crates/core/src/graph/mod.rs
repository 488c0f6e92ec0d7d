//! Adaptive-neighbour structural graph learning under a Laplacian rank
//! constraint.
//!
//! The same machinery serves both sides of the federation: clients learn a
//! sparse row-stochastic graph over their own samples, and the server refines
//! the assembled global graph until its Laplacian has exactly `C` zero
//! eigenvalues (one per connected component).

mod components;
mod eigen;
mod learn;
mod neighbors;
mod simplex;
mod sparse;

pub use components::{connected_components, ClusterAssignment, SampleRef, EDGE_TOLERANCE};
pub use eigen::{c_smallest_eigvecs, smallest_eigenpairs, EigenPairs, DENSE_EIGEN_LIMIT};
pub use learn::{
    default_neighbors, learn_private_graph, plain_knn_graph, rank_diagnostics, LearnedGraph,
    ObjectiveStep,
};
pub use neighbors::{estimate_gamma, knn_row_solve, pairwise_sq_dists, row_gamma, GammaEstimate};
pub use simplex::simplex_project;
pub use sparse::{graph_laplacian, SparseSym};
pub(crate) use learn::{alternate, RowRule};
pub(crate) use neighbors::sq_dist;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the row sums of a structural graph.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// `N` samples of dimension `d`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "point set needs at least one row and one column, got {rows}x{dim}"
            )));
        }
        if data.len() != rows * dim {
            return Err(Error::invalid(format!(
                "point set data has {} values, expected {rows}x{dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::invalid(format!("row {i} has a different length")));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter());
        }
        Self::new(m.nrows(), m.ncols(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.dim, &self.data)
    }

    /// New point set made of the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::invalid(format!("row index {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.dim, data)
    }

    /// Applies `f` to every row in place.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64], &mut [f64])) -> Result<Self> {
        let mut data = vec![0.0; self.data.len()];
        for (src, dst) in self.data.chunks_exact(self.dim).zip(data.chunks_exact_mut(self.dim)) {
            f(src, dst);
        }
        Self::new(self.rows, self.dim, data)
    }
}

/// Sparse row-stochastic affinity matrix without self loops.
///
/// Rows are kept sorted by column index and never store explicit zeros, so
/// two graphs with the same weights compare equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralGraph {
    n: usize,
    row_capacity: usize,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl StructuralGraph {
    pub fn new(n: usize, row_capacity: usize, neighbors: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let g = Self::normalized_layout(n, row_capacity, neighbors)?;
        g.validate()?;
        Ok(g)
    }

    /// Builds the graph without the row-sum check. Used for intermediate
    /// matrices (e.g. inter-client blocks before renormalisation).
    pub(crate) fn new_unnormalized(
        n: usize,
        row_capacity: usize,
        neighbors: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self> {
        Self::normalized_layout(n, row_capacity, neighbors)
    }

    fn normalized_layout(
        n: usize,
        row_capacity: usize,
        mut neighbors: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self> {
        if neighbors.len() != n {
            return Err(Error::invalid(format!(
                "graph has {} rows, expected {n}",
                neighbors.len()
            )));
        }
        for (i, row) in neighbors.iter_mut().enumerate() {
            row.retain(|&(_, w)| w != 0.0);
            row.sort_by_key(|&(j, _)| j);
            if row.windows(2).any(|p| p[0].0 == p[1].0) {
                return Err(Error::invalid(format!("row {i} has a duplicate column")));
            }
            if let Some(&(j, _)) = row.iter().find(|&&(j, _)| j >= n || j == i) {
                return Err(Error::invalid(format!("row {i} has invalid column {j}")));
            }
            if row.iter().any(|&(_, w)| !w.is_finite() || w < 0.0) {
                return Err(Error::invalid(format!("row {i} has a negative or non-finite weight")));
            }
        }
        Ok(Self {
            n,
            row_capacity,
            neighbors,
        })
    }

    fn validate(&self) -> Result<()> {
        for (i, row) in self.neighbors.iter().enumerate() {
            if row.len() > self.row_capacity {
                return Err(Error::invalid(format!(
                    "row {i} has {} entries, capacity is {}",
                    row.len(),
                    self.row_capacity
                )));
            }
            if row.iter().any(|&(_, w)| w > 1.0 + ROW_SUM_TOLERANCE) {
                return Err(Error::invalid(format!("row {i} has a weight above 1")));
            }
            let sum: f64 = row.iter().map(|&(_, w)| w).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::invalid(format!("row {i} sums to {sum}, expected 1")));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row_capacity(&self) -> usize {
        self.row_capacity
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.neighbors
    }

    pub fn nnz(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Weight of entry `(i, j)`, zero when absent.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.neighbors[i];
        row.binary_search_by_key(&j, |&(c, _)| c)
            .map_or(0.0, |pos| row[pos].1)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, row) in self.neighbors.iter().enumerate() {
            for &(j, w) in row {
                m[(i, j)] = w;
            }
        }
        m
    }

    /// Squared Frobenius distance to another graph of the same size.
    pub fn frobenius_sq_diff(&self, other: &Self) -> f64 {
        let mut total = 0.0;
        for (a, b) in self.neighbors.iter().zip(&other.neighbors) {
            let (mut p, mut q) = (0, 0);
            while p < a.len() || q < b.len() {
                let ja = a.get(p).map_or(usize::MAX, |e| e.0);
                let jb = b.get(q).map_or(usize::MAX, |e| e.0);
                let diff = if ja == jb {
                    let d = a[p].1 - b[q].1;
                    p += 1;
                    q += 1;
                    d
                } else if ja < jb {
                    p += 1;
                    a[p - 1].1
                } else {
                    q += 1;
                    b[q - 1].1
                };
                total += diff * diff;
            }
        }
        total
    }
}

/// `N x C` matrix whose columns are orthonormal Laplacian eigenvectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "RowMajor", try_from = "RowMajor")]
pub struct SpectralEmbedding {
    pub matrix: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct RowMajor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<SpectralEmbedding> for RowMajor {
    fn from(e: SpectralEmbedding) -> Self {
        let m = e.matrix;
        let data = (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
        RowMajor {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl TryFrom<RowMajor> for SpectralEmbedding {
    type Error = String;

    fn try_from(r: RowMajor) -> std::result::Result<Self, String> {
        if r.data.len() != r.rows * r.cols {
            return Err(format!("embedding data has {} values, expected {}x{}", r.data.len(), r.rows, r.cols));
        }
        Ok(SpectralEmbedding {
            matrix: DMatrix::from_row_slice(r.rows, r.cols, &r.data),
        })
    }
}

impl SpectralEmbedding {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn c(&self) -> usize {
        self.matrix.ncols()
    }

    /// `||f_i - f_j||^2` between two rows.
    pub fn row_sq_dist(&self, i: usize, j: usize) -> f64 {
        (0..self.matrix.ncols())
            .map(|c| {
                let d = self.matrix[(i, c)] - self.matrix[(j, c)];
                d * d
            })
            .sum()
    }

    /// Largest deviation of `F^T F` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.matrix.transpose() * &self.matrix;
        let eye = DMatrix::<f64>::identity(gram.nrows(), gram.ncols());
        (gram - eye).amax()
    }

    pub fn to_point_set(&self) -> Result<PointSet> {
        PointSet::from_matrix(&self.matrix)
    }
}

/// Spectral report on a Laplacian: the `C + 1` smallest eigenvalues and how
/// many of them count as zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankDiagnostics {
    pub eigenvalues: Vec<f64>,
    pub zero_count: usize,
    pub zero_tolerance: f64,
    /// Rank-penalty weight in force when the eigenvalues were computed.
    pub lambda: f64,
    pub iterations: usize,
    /// True when the graph reached exactly the target component count.
    pub converged: bool,
}
