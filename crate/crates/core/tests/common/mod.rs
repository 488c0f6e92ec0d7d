#![allow(dead_code)]

use fedgraph::data::LabeledDataset;
use fedgraph::federation::{GlobalFeedback, UploadMessage, SCHEMA_VERSION};
use fedgraph::graph::{PointSet, StructuralGraph};
use fedgraph::prototypes::{CovarianceForm, Prototype, PrototypeSet};
use rand::Rng;

/// Row-stochastic graph with random sparse rows.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, cap: usize) -> StructuralGraph {
    let rows = (0..n)
        .map(|i| {
            let mut cols: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            for k in (1..cols.len()).rev() {
                cols.swap(k, rng.random_range(0..=k));
            }
            let len = rng.random_range(1..=cap.min(cols.len()));
            let mut picked: Vec<usize> = cols[..len].to_vec();
            picked.sort_unstable();
            let raw: Vec<f64> = picked.iter().map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            picked.into_iter().zip(raw).map(|(j, w)| (j, w / total)).collect()
        })
        .collect();
    StructuralGraph::new(n, cap, rows).unwrap()
}

pub fn random_prototypes<R: Rng>(rng: &mut R, client_id: u32, c: usize, d: usize) -> PrototypeSet {
    let form = if rng.random_bool(0.5) { CovarianceForm::Full } else { CovarianceForm::Diagonal };
    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let prototypes = raw
        .iter()
        .map(|w| {
            let mut cov = vec![0.0; d * d];
            for a in 0..d {
                cov[a * d + a] = rng.random_range(0.1..2.0);
                if form == CovarianceForm::Full {
                    for b in 0..a {
                        let v = rng.random_range(-0.05..0.05);
                        cov[a * d + b] = v;
                        cov[b * d + a] = v;
                    }
                }
            }
            Prototype {
                mean: (0..d).map(|_| rng.random_range(-5.0..5.0)).collect(),
                covariance: cov,
                weight: w / total,
            }
        })
        .collect();
    PrototypeSet {
        client_id,
        dim: d,
        form,
        prototypes,
        noised: false,
        epsilon_spent: 0.0,
    }
}

pub fn random_upload<R: Rng>(rng: &mut R) -> UploadMessage {
    let n = rng.random_range(2..40);
    let cap = rng.random_range(1..=n.min(8));
    let c = rng.random_range(1..=4usize);
    let d = rng.random_range(1..=5);
    let client_id = rng.random_range(0..16);
    UploadMessage {
        schema_version: SCHEMA_VERSION,
        client_id,
        round: rng.random_range(0..8),
        graph: random_graph(rng, n, cap),
        prototypes: random_prototypes(rng, client_id, c, d),
        local_labels: (0..n).map(|_| rng.random_range(0..c)).collect(),
    }
}

pub fn random_feedback<R: Rng>(rng: &mut R) -> GlobalFeedback {
    let c = rng.random_range(1..=4usize);
    let n = rng.random_range(1..40);
    let client_id = rng.random_range(0..16);
    let d = rng.random_range(1..=4);
    GlobalFeedback {
        schema_version: SCHEMA_VERSION,
        client_id,
        round: rng.random_range(0..8),
        cluster_count: c,
        assignments: (0..n).map(|_| rng.random_range(0..c)).collect(),
        global_prototypes: random_prototypes(rng, u32::MAX, c, d),
    }
}

/// Applies one random change that always alters the byte string.
pub fn mutate<R: Rng>(bytes: &[u8], rng: &mut R) -> Vec<u8> {
    let mut out = bytes.to_vec();
    match rng.random_range(0..6) {
        0 => {
            let i = rng.random_range(0..out.len());
            out[i] ^= 1 << rng.random_range(0..8);
        }
        1 => {
            let i = rng.random_range(0..out.len());
            out[i] = out[i].wrapping_add(rng.random_range(1..=255));
        }
        2 => out.truncate(rng.random_range(0..out.len())),
        3 => {
            let i = rng.random_range(0..=out.len());
            out.insert(i, rng.random());
        }
        4 => {
            out.remove(rng.random_range(0..out.len()));
        }
        _ => {
            let flips = rng.random_range(2..6);
            for _ in 0..flips {
                let i = rng.random_range(0..out.len());
                out[i] ^= rng.random_range(1..=255u8);
            }
        }
    }
    if out == bytes {
        out.push(0);
    }
    out
}

/// Splits a labelled dataset with the given plan into per-client points and
/// per-client truth labels.
pub fn split(ds: &LabeledDataset, clients: &[Vec<usize>]) -> (Vec<PointSet>, Vec<Vec<usize>>) {
    let labels = ds.labels.as_ref().expect("labelled dataset");
    (
        clients.iter().map(|c| ds.points.select(c).unwrap()).collect(),
        clients.iter().map(|c| c.iter().map(|&i| labels[i]).collect()).collect(),
    )
}

pub fn laplace_cdf(x: f64, b: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / b).exp()
    } else {
        1.0 - 0.5 * (-x / b).exp()
    }
}

/// Kolmogorov-Smirnov statistic of `sample` against `cdf`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at significance 0.01.
pub fn ks_critical_01(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}
