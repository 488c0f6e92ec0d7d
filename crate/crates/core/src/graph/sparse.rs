//! Compressed sparse storage for symmetric matrices (graph Laplacians).

use nalgebra::DMatrix;

use super::StructuralGraph;

/// Symmetric matrix in CSR form. Both triangles are stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSym {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    /// Assembles a matrix from per-row `(column, value)` lists; duplicates are summed.
    pub fn from_rows(n: usize, mut rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows.iter_mut() {
            row.sort_by_key(|&(j, _)| j);
            let mut last: Option<usize> = None;
            for &(j, v) in row.iter() {
                if last == Some(j) {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(j);
                    values.push(v);
                    last = Some(j);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        self.indices[a..b].iter().copied().zip(self.values[a..b].iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).find(|&(j, _)| j == i).map_or(0.0, |(_, v)| v))
            .collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// `A * X` for a dense block of column vectors.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let cols = x.ncols();
        let mut out = DMatrix::zeros(self.n, cols);
        for c in 0..cols {
            let src = x.column(c);
            let mut dst = out.column_mut(c);
            for i in 0..self.n {
                let (a, b) = (self.indptr[i], self.indptr[i + 1]);
                let mut acc = 0.0;
                for p in a..b {
                    acc += self.values[p] * src[self.indices[p]];
                }
                dst[i] = acc;
            }
        }
        out
    }

    /// `x^T A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        (0..self.n)
            .map(|i| x[i] * self.row(i).map(|(j, v)| v * x[j]).sum::<f64>())
            .sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }

    /// Largest `|a_ij - a_ji|` over stored entries.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                let (a, b) = (self.indptr[j], self.indptr[j + 1]);
                let back = self.indices[a..b]
                    .binary_search(&i)
                    .map_or(0.0, |p| self.values[a + p]);
                worst = worst.max((v - back).abs());
            }
        }
        worst
    }

    /// Principal submatrix on `idx` (sorted ascending), reindexed to `0..idx.len()`.
    pub fn principal(&self, idx: &[usize]) -> SparseSym {
        let mut pos = vec![usize::MAX; self.n];
        for (p, &i) in idx.iter().enumerate() {
            pos[i] = p;
        }
        let rows = idx
            .iter()
            .map(|&i| {
                self.row(i)
                    .filter(|&(j, _)| pos[j] != usize::MAX)
                    .map(|(j, v)| (pos[j], v))
                    .collect()
            })
            .collect();
        SparseSym::from_rows(idx.len(), rows)
    }

    /// Largest absolute row sum, an upper bound on the spectral radius.
    pub fn inf_norm(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// `L = D - (E^T + E) / 2`, with `D` the degree matrix of the symmetrised graph.
pub fn graph_laplacian(g: &StructuralGraph) -> SparseSym {
    let n = g.n();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut degree = vec![0.0; n];
    for i in 0..n {
        for &(j, w) in g.row(i) {
            let half = 0.5 * w;
            rows[i].push((j, -half));
            rows[j].push((i, -half));
            degree[i] += half;
            degree[j] += half;
        }
    }
    for (i, d) in degree.into_iter().enumerate() {
        rows[i].push((i, d));
    }
    SparseSym::from_rows(n, rows)
}
