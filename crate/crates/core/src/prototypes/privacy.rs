//! Laplace-mechanism release of prototypes.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CovarianceForm, Prototype, PrototypeSet, COVARIANCE_RIDGE};
use crate::error::{Error, Result};
use crate::graph::PointSet;

/// L1 sensitivities of the released statistics for data with `||x||_1 <= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBounds {
    pub delta_mu: f64,
    pub delta_sigma: f64,
    pub n_c_min: usize,
}

/// `delta_mu = 2 / n_c_min`, `delta_sigma = (2 sqrt 2 + 4) / n_c_min`.
pub fn compute_sensitivities(n_c_min: usize) -> Result<SensitivityBounds> {
    if n_c_min == 0 {
        return Err(Error::invalid("smallest cluster size must be at least 1"));
    }
    let n = n_c_min as f64;
    Ok(SensitivityBounds {
        delta_mu: 2.0 / n,
        delta_sigma: (2.0 * std::f64::consts::SQRT_2 + 4.0) / n,
        n_c_min,
    })
}

/// Laplace scale for one of the two equal halves of the budget.
pub fn laplace_scale(delta: f64, epsilon: f64) -> f64 {
    delta / (epsilon / 2.0)
}

/// Scales every row to unit L1 norm.
pub fn l1_normalize(points: &PointSet) -> Result<PointSet> {
    if let Some(i) = points.iter_rows().position(|r| r.iter().all(|&v| v == 0.0)) {
        return Err(Error::invalid(format!("row {i} is all zeros and has no L1 direction")));
    }
    points.map_rows(|src, dst| {
        let norm: f64 = src.iter().map(|v| v.abs()).sum();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s / norm;
        }
    })
}

/// Divides every row by a public bound on the L1 norm and clips any row
/// still above norm 1 onto the unit L1 sphere. Unlike [`l1_normalize`] this
/// keeps relative distances between rows.
pub fn l1_bound_scale(points: &PointSet, bound: f64) -> Result<PointSet> {
    if !(bound.is_finite() && bound > 0.0) {
        return Err(Error::invalid(format!("L1 bound must be positive, got {bound}")));
    }
    points.map_rows(|src, dst| {
        let norm: f64 = src.iter().map(|v| v.abs()).sum::<f64>() / bound;
        let div = if norm > 1.0 { bound * norm } else { bound };
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s / div;
        }
    })
}

/// Seeded Laplace sampler that counts its draws.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    draws: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            draws: 0,
        }
    }

    /// Independent stream per `(seed, client, round)`.
    pub fn for_client(seed: u64, client_id: u32, round: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(client_id));
        rng.set_stream(u64::from(round));
        Self { rng, draws: 0 }
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// One draw from Laplace(0, b) by inverting the CDF.
    pub fn laplace(&mut self, b: f64) -> f64 {
        self.draws += 1;
        loop {
            let u: f64 = self.rng.random::<f64>() - 0.5;
            let tail = 1.0 - 2.0 * u.abs();
            if tail > 0.0 {
                return -b * u.signum() * tail.ln();
            }
        }
    }
}

/// Symmetrises `m`, then raises every eigenvalue below `floor` to `floor`.
pub fn psd_repair(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Adds Laplace noise of scale `delta_mu / (eps/2)` to every mean entry and
/// `delta_sigma / (eps/2)` to every covariance entry (diagonal only in
/// diagonal form), re-symmetrises and repairs each covariance with floor
/// `max(ridge, covariance noise scale)`. Weights are not released: the
/// output carries uniform weights.
pub fn privatize_prototypes(
    p: &PrototypeSet,
    bounds: &SensitivityBounds,
    epsilon: f64,
    noise: &mut NoiseSource,
) -> Result<PrototypeSet> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if p.noised {
        return Err(Error::invalid("prototypes are already noised"));
    }
    let b_mu = laplace_scale(bounds.delta_mu, epsilon);
    let b_sigma = laplace_scale(bounds.delta_sigma, epsilon);
    let floor = COVARIANCE_RIDGE.max(b_sigma);
    let d = p.dim;
    let uniform = 1.0 / p.len().max(1) as f64;
    let prototypes = p
        .prototypes
        .iter()
        .map(|proto| {
            let mean: Vec<f64> = proto.mean.iter().map(|m| m + noise.laplace(b_mu)).collect();
            let mut cov = proto.cov_matrix();
            match p.form {
                CovarianceForm::Full => {
                    for v in cov.iter_mut() {
                        *v += noise.laplace(b_sigma);
                    }
                }
                CovarianceForm::Diagonal => {
                    for k in 0..d {
                        cov[(k, k)] += noise.laplace(b_sigma);
                    }
                }
            }
            let cov = psd_repair(&cov, floor);
            let mut out = Prototype::from_parts(&nalgebra::DVector::from_vec(mean), &cov, uniform);
            if p.form == CovarianceForm::Diagonal {
                for i in 0..d {
                    for j in 0..d {
                        if i != j {
                            out.covariance[i * d + j] = 0.0;
                        }
                    }
                }
            }
            out
        })
        .collect();
    Ok(PrototypeSet {
        client_id: p.client_id,
        dim: d,
        form: p.form,
        prototypes,
        noised: true,
        epsilon_spent: epsilon,
    })
}
