//! Gaussian cluster prototypes and their differentially private release.

mod gmm;
mod privacy;

pub use gmm::{fit_gmm, responsibilities, GmmFit, EM_MAX_ITER, EM_TOL};
pub use privacy::{
    compute_sensitivities, l1_bound_scale, l1_normalize, laplace_scale, privatize_prototypes,
    psd_repair, NoiseSource, SensitivityBounds,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PointSet;

/// Ridge added to every estimated covariance.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

/// Dimensions above this use diagonal covariances.
pub const FULL_COVARIANCE_MAX_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceForm {
    Full,
    Diagonal,
}

impl CovarianceForm {
    pub fn for_dim(d: usize) -> Self {
        if d <= FULL_COVARIANCE_MAX_DIM {
            CovarianceForm::Full
        } else {
            CovarianceForm::Diagonal
        }
    }
}

/// One Gaussian summary. The covariance is stored dense and row-major even in
/// diagonal form (off-diagonal entries are then zero).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    pub weight: f64,
}

impl Prototype {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.covariance)
    }

    pub fn from_parts(mean: &DVector<f64>, cov: &DMatrix<f64>, weight: f64) -> Self {
        let d = mean.len();
        let mut covariance = Vec::with_capacity(d * d);
        for i in 0..d {
            covariance.extend(cov.row(i).iter());
        }
        Self {
            mean: mean.iter().copied().collect(),
            covariance,
            weight,
        }
    }
}

/// The `C` prototypes one client releases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub client_id: u32,
    pub dim: usize,
    pub form: CovarianceForm,
    pub prototypes: Vec<Prototype>,
    pub noised: bool,
    pub epsilon_spent: f64,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, p) in self.prototypes.iter().enumerate() {
            if p.mean.len() != self.dim || p.covariance.len() != self.dim * self.dim {
                return Err(Error::invalid(format!("prototype {k} has the wrong shape")));
            }
            if !(0.0..=1.0).contains(&p.weight) {
                return Err(Error::invalid(format!("prototype {k} weight {} outside [0,1]", p.weight)));
            }
            if p.mean.iter().chain(&p.covariance).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("prototype {k} has non-finite entries")));
            }
            let cov = p.cov_matrix();
            if (&cov - cov.transpose()).amax() > 1e-9 {
                return Err(Error::invalid(format!("prototype {k} covariance is not symmetric")));
            }
        }
        if !self.noised {
            let total: f64 = self.prototypes.iter().map(|p| p.weight).sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("prototype weights sum to {total}")));
            }
        }
        Ok(())
    }
}

/// Sample mean and covariance (`1/n` normalisation, plus the ridge) of the
/// selected rows, in the given covariance form.
pub(crate) fn gaussian_of(
    points: &PointSet,
    members: &[usize],
    form: CovarianceForm,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = points.dim();
    let n = members.len().max(1) as f64;
    let mut mean = DVector::zeros(d);
    for &i in members {
        mean += DVector::from_column_slice(points.row(i));
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for &i in members {
        let x = DVector::from_column_slice(points.row(i)) - &mean;
        cov.ger(1.0 / n, &x, &x, 1.0);
    }
    if form == CovarianceForm::Diagonal {
        cov = DMatrix::from_diagonal(&cov.diagonal());
    }
    for k in 0..d {
        cov[(k, k)] += COVARIANCE_RIDGE;
    }
    (mean, cov)
}

/// One Gaussian prototype per label in `0..c` from hard assignments. Empty
/// labels get the overall sample moments and weight zero.
pub fn prototypes_from_labels(
    points: &PointSet,
    labels: &[usize],
    c: usize,
    client_id: u32,
) -> Result<PrototypeSet> {
    if labels.len() != points.rows() {
        return Err(Error::invalid(format!(
            "{} labels for {} points",
            labels.len(),
            points.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} outside 0..{c}")));
    }
    let form = CovarianceForm::for_dim(points.dim());
    let mut members = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let all: Vec<usize> = (0..points.rows()).collect();
    let n = points.rows() as f64;
    let prototypes = members
        .iter()
        .map(|m| {
            let src = if m.is_empty() { &all } else { m };
            let (mean, cov) = gaussian_of(points, src, form);
            Prototype::from_parts(&mean, &cov, m.len() as f64 / n)
        })
        .collect();
    Ok(PrototypeSet {
        client_id,
        dim: points.dim(),
        form,
        prototypes,
        noised: false,
        epsilon_spent: 0.0,
    })
}

/// Size of the smallest non-empty cluster.
pub fn smallest_cluster(labels: &[usize], c: usize) -> usize {
    let mut counts = vec![0usize; c];
    for &l in labels {
        counts[l] += 1;
    }
    counts.into_iter().filter(|&n| n > 0).min().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_identical_cluster_has_ridge_covariance() {
        let pts = PointSet::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let set = prototypes_from_labels(&pts, &[0, 0, 0], 1, 0).unwrap();
        let p = &set.prototypes[0];
        assert_eq!(p.mean, vec![1.0, 2.0]);
        assert_eq!(p.covariance, vec![1e-6, 0.0, 0.0, 1e-6]);
        assert_eq!(p.weight, 1.0);
        set.validate().unwrap();
    }

    #[test]
    fn weights_are_cluster_fractions() {
        let pts = PointSet::from_rows(&[vec![0.0], vec![1.0], vec![5.0], vec![6.0]]).unwrap();
        let set = prototypes_from_labels(&pts, &[0, 0, 0, 1], 2, 3).unwrap();
        assert_eq!(set.prototypes[0].weight, 0.75);
        assert_eq!(set.prototypes[1].weight, 0.25);
        assert!((set.prototypes[0].mean[0] - 2.0).abs() < 1e-12);
        assert_eq!(smallest_cluster(&[0, 0, 0, 1], 2), 1);
    }

    #[test]
    fn diagonal_form_above_limit() {
        assert_eq!(CovarianceForm::for_dim(64), CovarianceForm::Full);
        assert_eq!(CovarianceForm::for_dim(65), CovarianceForm::Diagonal);
    }
}
