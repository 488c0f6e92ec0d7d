//! Expectation-maximisation for Gaussian mixtures.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CovarianceForm, Prototype, PrototypeSet, COVARIANCE_RIDGE};
use crate::error::{Error, Result};
use crate::graph::{ClusterAssignment, PointSet};
use crate::kmeans::{kmeanspp_init, nearest_center};

pub const EM_MAX_ITER: usize = 100;
pub const EM_TOL: f64 = 1e-6;
const MAX_COLLAPSES: usize = 3;

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub prototypes: PrototypeSet,
    /// Hard assignment by largest responsibility.
    pub assignment: ClusterAssignment,
    /// Log-likelihood evaluated at the start of every EM iteration.
    pub log_likelihood: Vec<f64>,
    pub collapses: usize,
}

struct Component {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn log_densities(points: &PointSet, comps: &[Component]) -> Result<DMatrix<f64>> {
    let d = points.dim() as f64;
    let mut out = DMatrix::zeros(points.rows(), comps.len());
    for (k, comp) in comps.iter().enumerate() {
        let chol = comp.cov.clone().cholesky().ok_or_else(|| {
            Error::numeric(format!("covariance of component {k} is not positive definite"))
        })?;
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let base = comp.weight.max(f64::MIN_POSITIVE).ln()
            - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet);
        for (i, row) in points.iter_rows().enumerate() {
            let x = DVector::from_column_slice(row) - &comp.mean;
            let z = chol.l().solve_lower_triangular(&x).expect("cholesky factor is invertible");
            out[(i, k)] = base - 0.5 * z.norm_squared();
        }
    }
    Ok(out)
}

/// Normalises weighted log densities into responsibilities; returns the
/// total log-likelihood.
fn normalise(logp: &mut DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for mut row in logp.row_iter_mut() {
        let top = row.max();
        let lse = top + row.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        total += lse;
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    total
}

/// Posterior cluster probabilities of every point under `protos`.
pub fn responsibilities(points: &PointSet, protos: &PrototypeSet) -> Result<DMatrix<f64>> {
    let comps: Vec<Component> = protos
        .prototypes
        .iter()
        .map(|p| Component {
            weight: p.weight,
            mean: p.mean_vector(),
            cov: p.cov_matrix(),
        })
        .collect();
    let mut r = log_densities(points, &comps)?;
    normalise(&mut r);
    Ok(r)
}

fn m_step(points: &PointSet, resp: &DMatrix<f64>, form: CovarianceForm) -> Vec<(f64, Component)> {
    let (n, d) = (points.rows(), points.dim());
    (0..resp.ncols())
        .map(|k| {
            let nk: f64 = resp.column(k).sum();
            let mut mean = DVector::zeros(d);
            for (i, row) in points.iter_rows().enumerate() {
                mean.axpy(resp[(i, k)], &DVector::from_column_slice(row), 1.0);
            }
            mean /= nk.max(f64::MIN_POSITIVE);
            let mut cov = DMatrix::zeros(d, d);
            for (i, row) in points.iter_rows().enumerate() {
                let x = DVector::from_column_slice(row) - &mean;
                cov.ger(resp[(i, k)], &x, &x, 1.0);
            }
            cov /= nk.max(f64::MIN_POSITIVE);
            if form == CovarianceForm::Diagonal {
                cov = DMatrix::from_diagonal(&cov.diagonal());
            }
            for j in 0..d {
                cov[(j, j)] += COVARIANCE_RIDGE;
            }
            (
                nk,
                Component {
                    weight: nk / n as f64,
                    mean,
                    cov,
                },
            )
        })
        .collect()
}

fn overall_cov(points: &PointSet, form: CovarianceForm) -> DMatrix<f64> {
    let all: Vec<usize> = (0..points.rows()).collect();
    super::gaussian_of(points, &all, form).1
}

/// Fits a `c`-component mixture by EM from a k-means++ start. A component
/// that loses all its mass is re-seeded at the point farthest from every
/// mean; the third such collapse is an error.
pub fn fit_gmm(points: &PointSet, c: usize, seed: u64) -> Result<GmmFit> {
    let n = points.rows();
    if c == 0 || c > n {
        return Err(Error::invalid(format!("GMM needs 1 <= c <= n, got c={c}, n={n}")));
    }
    let form = CovarianceForm::for_dim(points.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeanspp_init(points, c, &mut rng);
    let hard = nearest_center(points, &centers);
    let mut resp = DMatrix::zeros(n, c);
    for (i, &l) in hard.iter().enumerate() {
        resp[(i, l)] = 1.0;
    }

    let mut trace = Vec::new();
    let mut collapses = 0;
    let mut comps;
    loop {
        let fitted = m_step(points, &resp, form);
        let collapsed: Vec<usize> = fitted
            .iter()
            .enumerate()
            .filter(|(_, (nk, _))| *nk < 1.0)
            .map(|(k, _)| k)
            .collect();
        comps = fitted.into_iter().map(|(_, comp)| comp).collect::<Vec<_>>();
        if !collapsed.is_empty() {
            collapses += collapsed.len();
            if collapses >= MAX_COLLAPSES {
                return Err(Error::DegenerateFit(format!(
                    "{collapses} component collapses while fitting {c} components to {n} points"
                )));
            }
            log::warn!("GMM component(s) {collapsed:?} collapsed; re-seeding");
            let means: Vec<Vec<f64>> = comps.iter().map(|m| m.mean.iter().copied().collect()).collect();
            let live: Vec<Vec<f64>> = means
                .iter()
                .enumerate()
                .filter(|(k, _)| !collapsed.contains(k))
                .map(|(_, m)| m.clone())
                .collect();
            let mut taken = Vec::new();
            for &k in &collapsed {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .map(|i| {
                        let row = points.row(i);
                        let near = live
                            .iter()
                            .map(|m| row.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                            .fold(f64::INFINITY, f64::min);
                        (i, near)
                    })
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                    .0;
                taken.push(far);
                comps[k].mean = DVector::from_column_slice(points.row(far));
                comps[k].cov = overall_cov(points, form);
                comps[k].weight = 1.0 / c as f64;
            }
            let total: f64 = comps.iter().map(|m| m.weight).sum();
            for m in comps.iter_mut() {
                m.weight /= total;
            }
        }
        let mut logp = log_densities(points, &comps)?;
        let ll = normalise(&mut logp);
        resp = logp;
        let done = trace.last().is_some_and(|prev: &f64| (ll - prev).abs() < EM_TOL)
            || trace.len() + 1 >= EM_MAX_ITER;
        trace.push(ll);
        if done && collapsed.is_empty() {
            break;
        }
    }

    let labels: Vec<usize> = resp
        .row_iter()
        .map(|r| r.iter().enumerate().fold((0, f64::MIN), |b, (k, &v)| if v > b.1 { (k, v) } else { b }).0)
        .collect();
    let prototypes = comps
        .iter()
        .map(|m| Prototype::from_parts(&m.mean, &m.cov, m.weight))
        .collect();
    Ok(GmmFit {
        prototypes: PrototypeSet {
            client_id: 0,
            dim: points.dim(),
            form,
            prototypes,
            noised: false,
            epsilon_spent: 0.0,
        },
        assignment: ClusterAssignment::new(labels, c),
        log_likelihood: trace,
        collapses,
    })
}
