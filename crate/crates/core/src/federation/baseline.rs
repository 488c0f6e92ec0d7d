//! Federated k-means comparator: local centroids pooled and re-clustered.

use rayon::prelude::*;

use super::FederationConfig;
use crate::error::{Error, Result};
use crate::graph::PointSet;
use crate::kmeans::{kmeans, nearest_center};

const RESTARTS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRun {
    pub client_labels: Vec<Vec<usize>>,
    pub centers: Vec<Vec<f64>>,
}

impl BaselineRun {
    pub fn labels(&self) -> Vec<usize> {
        self.client_labels.iter().flatten().copied().collect()
    }
}

pub fn baseline_federated_kmeans(datasets: &[PointSet], cfg: &FederationConfig) -> Result<BaselineRun> {
    if datasets.is_empty() {
        return Err(Error::invalid("no client datasets"));
    }
    let c = cfg.clusters;
    let local = datasets
        .par_iter()
        .enumerate()
        .map(|(k, d)| {
            let fit = kmeans(d, c.min(d.rows()), RESTARTS, cfg.client_seed(k as u32))
                .map_err(|e| e.for_client(k as u32))?;
            Ok(fit.centers)
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<Vec<f64>> = local.into_iter().flatten().collect();
    let centers = if datasets.len() == 1 {
        pooled
    } else {
        let pooled = PointSet::from_rows(&pooled)?;
        kmeans(&pooled, c.min(pooled.rows()), RESTARTS, cfg.seed ^ super::SERVER_STREAM)?.centers
    };
    let client_labels = datasets.iter().map(|d| nearest_center(d, &centers)).collect();
    Ok(BaselineRun { client_labels, centers })
}
