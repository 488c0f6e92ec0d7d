//! Smallest eigenpairs of graph Laplacians.
//!
//! A Laplacian is block diagonal over the connected components of its
//! support, so each component contributes one exact zero eigenpair (the
//! normalised indicator) and the remaining spectrum is computed per
//! component: dense decomposition for small blocks, LOBPCG with a Jacobi
//! preconditioner for large ones.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{RankDiagnostics, SparseSym, SpectralEmbedding};
use crate::error::{Error, Result};

/// Components up to this size use a dense symmetric decomposition.
pub const DENSE_EIGEN_LIMIT: usize = 1000;

/// Relative residual tolerance for the iterative solver.
const LOBPCG_TOL: f64 = 1e-8;
const LOBPCG_MAX_ITER: usize = 600;
const RESTART_CAP: usize = 5;
/// Extra block columns carried beyond the requested count.
const GUARD: usize = 3;
/// Relative factor for the zero-eigenvalue threshold.
const ZERO_REL: f64 = 1e-8;

/// The `count` smallest eigenvalues (ascending) and their orthonormal
/// eigenvectors as columns.
#[derive(Clone, Debug)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
    /// Iterative-solver iterations spent (zero on the dense path).
    pub iterations: usize,
}

struct Candidate {
    value: f64,
    component: usize,
    order: usize,
    vector: DVector<f64>,
}

/// Components of the off-diagonal support of `l`, each sorted ascending and
/// ordered by smallest member.
fn support_components(l: &SparseSym) -> Vec<Vec<usize>> {
    let n = l.n();
    let mut label = vec![usize::MAX; n];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = vec![start];
        label[start] = id;
        stack.push(start);
        while let Some(u) = stack.pop() {
            for (v, w) in l.row(u) {
                if v != u && w != 0.0 && label[v] == usize::MAX {
                    label[v] = id;
                    members.push(v);
                    stack.push(v);
                }
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps
}

/// The `count` smallest eigenpairs of a symmetric Laplacian-like matrix
/// (zero row sums). `warm` may carry the previous solution to speed up the
/// iterative path.
pub fn smallest_eigenpairs(
    l: &SparseSym,
    count: usize,
    warm: Option<&DMatrix<f64>>,
) -> Result<EigenPairs> {
    let n = l.n();
    if count == 0 || count > n {
        return Err(Error::invalid(format!(
            "requested {count} eigenpairs of a {n}x{n} matrix"
        )));
    }
    let comps = support_components(l);
    let extra = count.saturating_sub(comps.len());
    let mut candidates = Vec::new();
    let mut iterations = 0;
    for (ci, members) in comps.iter().enumerate() {
        let s = members.len();
        candidates.push(Candidate {
            value: 0.0,
            component: ci,
            order: 0,
            vector: DVector::from_element(s, 1.0 / (s as f64).sqrt()),
        });
        let need = extra.min(s - 1);
        if need == 0 {
            continue;
        }
        let sub = l.principal(members);
        let (values, vectors, its) = if s <= DENSE_EIGEN_LIMIT {
            dense_nonzero_pairs(&sub, need)
        } else {
            let warm_rows = warm.map(|w| {
                DMatrix::from_fn(s, w.ncols(), |r, c| w[(members[r], c)])
            });
            lobpcg_nonzero_pairs(&sub, need, warm_rows, ci as u64)?
        };
        iterations += its;
        for (o, v) in values.into_iter().enumerate() {
            candidates.push(Candidate {
                value: v,
                component: ci,
                order: o + 1,
                vector: vectors.column(o).into_owned(),
            });
        }
    }
    candidates.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then(a.component.cmp(&b.component))
            .then(a.order.cmp(&b.order))
    });
    candidates.truncate(count);
    let mut vectors = DMatrix::zeros(n, count);
    let mut values = Vec::with_capacity(count);
    for (col, cand) in candidates.iter().enumerate() {
        for (r, &i) in comps[cand.component].iter().enumerate() {
            vectors[(i, col)] = cand.vector[r];
        }
        values.push(cand.value);
    }
    Ok(EigenPairs {
        values,
        vectors,
        iterations,
    })
}

/// Shift that pushes the constant mode above the whole spectrum.
fn deflation_shift(l: &SparseSym) -> f64 {
    2.0 * l.inf_norm() + 1.0
}

fn dense_nonzero_pairs(sub: &SparseSym, need: usize) -> (Vec<f64>, DMatrix<f64>, usize) {
    let s = sub.n();
    let shift = deflation_shift(sub) / s as f64;
    let mut m = sub.to_dense();
    m.add_scalar_mut(shift);
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order[..need].iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(s, need, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, sign_fixed(vectors), 0)
}

/// Makes the largest-magnitude entry of each column positive.
fn sign_fixed(mut v: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in v.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0_f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    v
}

/// Orthonormalises the columns of `m` (two Gram-Schmidt passes), dropping
/// columns that become numerically dependent.
fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut kept: Vec<DVector<f64>> = Vec::with_capacity(m.ncols());
    for c in 0..m.ncols() {
        let mut v = m.column(c).into_owned();
        let original = v.norm();
        if original == 0.0 || !original.is_finite() {
            continue;
        }
        for _ in 0..2 {
            for q in &kept {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-10 * original {
            kept.push(v / norm);
        }
    }
    if kept.is_empty() {
        return DMatrix::zeros(m.nrows(), 0);
    }
    DMatrix::from_columns(&kept)
}

/// Removes the constant component; columns that were (nearly) constant
/// become exactly zero so they are dropped on orthonormalisation.
fn project_out_constant(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let before = col.norm();
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        if col.norm() <= 1e-8 * before {
            col.fill(0.0);
        }
    }
}

/// `need` smallest eigenpairs of a connected Laplacian block, excluding the
/// constant null vector, by LOBPCG on the orthogonal complement of `1`.
fn lobpcg_nonzero_pairs(
    sub: &SparseSym,
    need: usize,
    warm: Option<DMatrix<f64>>,
    seed: u64,
) -> Result<(Vec<f64>, DMatrix<f64>, usize)> {
    let s = sub.n();
    let block = (need + GUARD).min(s - 1);
    let tol = LOBPCG_TOL * sub.inf_norm().max(1.0);
    let inv_diag: Vec<f64> = sub
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1ab0_5eed ^ seed);
    let apply = |x: &DMatrix<f64>| -> DMatrix<f64> {
        let mut y = sub.mul_dense(x);
        project_out_constant(&mut y);
        y
    };

    let mut start = warm.unwrap_or_else(|| DMatrix::zeros(s, 0));
    let mut total_iters = 0;
    let mut last_residual = f64::INFINITY;
    for _restart in 0..RESTART_CAP {
        let mut x0 = start.clone();
        project_out_constant(&mut x0);
        let mut x = orthonormalize(&x0);
        while x.ncols() < block {
            let fill = block - x.ncols();
            let mut noise = DMatrix::from_fn(s, fill, |_, _| StandardNormal.sample(&mut rng));
            project_out_constant(&mut noise);
            let mut joined = DMatrix::zeros(s, x.ncols() + fill);
            joined.columns_mut(0, x.ncols()).copy_from(&x);
            joined.columns_mut(x.ncols(), fill).copy_from(&noise);
            x = orthonormalize(&joined);
        }
        if x.ncols() > block {
            x = x.columns(0, block).into_owned();
        }
        let mut ax = apply(&x);
        let (mut theta, rot) = rayleigh_ritz(&x, &ax, block);
        x = &x * &rot;
        ax = &ax * &rot;
        let mut p: Option<(DMatrix<f64>, DMatrix<f64>)> = None;

        for _ in 0..LOBPCG_MAX_ITER {
            total_iters += 1;
            let mut r = &ax - &x * DMatrix::from_diagonal(&DVector::from_vec(theta.clone()));
            let worst = (0..need).map(|c| r.column(c).norm()).fold(0.0, f64::max);
            last_residual = worst;
            if worst <= tol {
                let vectors = x.columns(0, need).into_owned();
                return Ok((theta[..need].to_vec(), sign_fixed(vectors), total_iters));
            }
            for (i, mut row) in r.row_iter_mut().enumerate() {
                row *= inv_diag[i];
            }
            project_out_constant(&mut r);
            let mut cols: Vec<DVector<f64>> = x.column_iter().map(|c| c.into_owned()).collect();
            cols.extend(r.column_iter().map(|c| c.into_owned()));
            if let Some((pm, _)) = &p {
                cols.extend(pm.column_iter().map(|c| c.into_owned()));
            }
            let basis = orthonormalize(&DMatrix::from_columns(&cols));
            if basis.ncols() < block {
                break;
            }
            let abasis = apply(&basis);
            let (vals, coeff) = rayleigh_ritz(&basis, &abasis, block);
            let x_new = &basis * &coeff;
            let ax_new = &abasis * &coeff;
            let rest = basis.ncols() - block;
            p = if rest > 0 {
                let c_rest = coeff.rows(block, rest);
                Some((
                    basis.columns(block, rest) * c_rest,
                    abasis.columns(block, rest) * c_rest,
                ))
            } else {
                None
            };
            x = x_new;
            ax = ax_new;
            theta = vals;
        }
        start = x;
    }
    Err(Error::numeric(format!(
        "LOBPCG did not converge after {total_iters} iterations \
         ({RESTART_CAP} restarts); residual {last_residual:.3e} > {tol:.3e}"
    )))
}

/// Rayleigh-Ritz on an orthonormal basis: the `keep` smallest Ritz values and
/// their coefficient vectors.
fn rayleigh_ritz(basis: &DMatrix<f64>, abasis: &DMatrix<f64>, keep: usize) -> (Vec<f64>, DMatrix<f64>) {
    let g = basis.transpose() * abasis;
    let g = (&g + g.transpose()) * 0.5;
    let eig = SymmetricEigen::new(g);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let keep = keep.min(order.len());
    let vals = order[..keep].iter().map(|&i| eig.eigenvalues[i]).collect();
    let coeff = DMatrix::from_fn(eig.eigenvectors.nrows(), keep, |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (vals, coeff)
}

/// Threshold below which an eigenvalue counts as zero: relative to the
/// largest reported eigenvalue and to the largest degree, so that a graph
/// with more than `c` components (all reported eigenvalues zero) is still
/// judged on a meaningful scale.
pub(crate) fn zero_tolerance(values: &[f64], l: &SparseSym) -> f64 {
    let top = values.iter().copied().fold(0.0, f64::max);
    let degree = l.diagonal().into_iter().fold(0.0, f64::max);
    ZERO_REL * top.max(degree).max(f64::MIN_POSITIVE)
}

/// Spectral embedding from the `c` smallest eigenvectors of `l`, with the
/// `c + 1` smallest eigenvalues in the diagnostics.
pub fn c_smallest_eigvecs(l: &SparseSym, c: usize) -> Result<(SpectralEmbedding, RankDiagnostics)> {
    let (emb, diag, _) = c_smallest_eigvecs_warm(l, c, None)?;
    Ok((emb, diag))
}

pub(crate) fn c_smallest_eigvecs_warm(
    l: &SparseSym,
    c: usize,
    warm: Option<&DMatrix<f64>>,
) -> Result<(SpectralEmbedding, RankDiagnostics, DMatrix<f64>)> {
    let n = l.n();
    if c == 0 || c >= n {
        return Err(Error::invalid(format!("need 1 <= c < n, got c={c}, n={n}")));
    }
    let asym = l.asymmetry();
    if asym > 1e-8 {
        return Err(Error::invalid(format!("matrix is not symmetric (deviation {asym:.3e})")));
    }
    let pairs = smallest_eigenpairs(l, c + 1, warm)?;
    let zero_tolerance = zero_tolerance(&pairs.values, l);
    let zero_count = pairs.values.iter().filter(|v| v.abs() < zero_tolerance).count();
    let embedding = SpectralEmbedding {
        matrix: pairs.vectors.columns(0, c).into_owned(),
    };
    let diagnostics = RankDiagnostics {
        eigenvalues: pairs.values,
        zero_count,
        zero_tolerance,
        lambda: 0.0,
        iterations: pairs.iterations,
        converged: zero_count == c,
    };
    Ok((embedding, diagnostics, pairs.vectors))
}
