//! Datasets: synthetic generators, CSV ingestion and client partitioning.

mod metrics;

pub use metrics::{ari, hungarian_accuracy, min_cost_assignment, nmi};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PointSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub name: String,
    pub points: PointSet,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
}

impl LabeledDataset {
    /// Rows `indices` with their labels.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        Ok(LabeledDataset {
            name: self.name.clone(),
            points: self.points.select(indices)?,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
        })
    }
}

/// Two interleaving half circles, `n / 2` points each, with isotropic
/// Gaussian noise.
pub fn gen_moons(n: usize, noise_sigma: f64, seed: u64) -> Result<LabeledDataset> {
    if n < 4 || n % 2 == 1 {
        return Err(Error::invalid(format!("moons need an even n >= 4, got {n}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).expect("valid sigma");
    let half = n / 2;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for arc in 0..2 {
        for _ in 0..half {
            let t = rng.random::<f64>() * std::f64::consts::PI;
            let (x, y) = if arc == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            data.push(x + noise.sample(&mut rng));
            data.push(y + noise.sample(&mut rng));
            labels.push(arc);
        }
    }
    Ok(LabeledDataset {
        name: "moons".into(),
        points: PointSet::new(n, 2, data)?,
        labels: Some(labels),
        class_count: 2,
    })
}

/// Noise level of the non-circle coordinates in [`gen_ring`].
pub const RING_NOISE: f64 = 0.05;

/// Concentric circles: class `c` lies on a circle of radius `1 + c` in the
/// first two coordinates; every other coordinate is `N(0, 0.05^2)`.
pub fn gen_ring(n: usize, dim: usize, classes: usize, seed: u64) -> Result<LabeledDataset> {
    if classes == 0 || n % classes != 0 || n == 0 {
        return Err(Error::invalid(format!("ring needs n divisible by classes, got n={n}, classes={classes}")));
    }
    if dim < 2 {
        return Err(Error::invalid(format!("ring needs dim >= 2, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, RING_NOISE).expect("valid sigma");
    let per = n / classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        let r = 1.0 + c as f64;
        for _ in 0..per {
            let t = rng.random::<f64>() * std::f64::consts::TAU;
            data.push(r * t.cos());
            data.push(r * t.sin());
            data.extend((2..dim).map(|_| noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    Ok(LabeledDataset {
        name: "ring".into(),
        points: PointSet::new(n, dim, data)?,
        labels: Some(labels),
        class_count: classes,
    })
}

/// Which CSV column holds the labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

/// Reads a numeric CSV. A first row with any non-numeric feature cell is a
/// header. Labels are factorised in order of first appearance.
pub fn load_csv(path: &Path, label: Option<&LabelColumn>) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(records.len() + 1, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        records.push((line, rec));
    }
    if records.is_empty() {
        return Err(parse_err(1, "file has no rows".into()));
    }
    let width = records[0].1.len();
    let header_names: Option<Vec<String>> = {
        let first = &records[0].1;
        let label_idx = match label {
            Some(LabelColumn::Index(i)) => Some(*i),
            _ => None,
        };
        let non_numeric = first
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != label_idx)
            .any(|(_, v)| v.parse::<f64>().is_err());
        non_numeric.then(|| first.iter().map(str::to_string).collect())
    };
    let label_idx = match label {
        None => None,
        Some(LabelColumn::Index(i)) if *i < width => Some(*i),
        Some(LabelColumn::Index(i)) => {
            return Err(Error::Config(format!("label column {i} out of range (width {width})")))
        }
        Some(LabelColumn::Name(name)) => Some(
            header_names
                .as_ref()
                .and_then(|h| h.iter().position(|c| c == name))
                .ok_or_else(|| Error::Config(format!("no column named {name:?}")))?,
        ),
    };
    let body = if header_names.is_some() { &records[1..] } else { &records[..] };
    let dim = width - usize::from(label_idx.is_some());
    let mut data = Vec::with_capacity(body.len() * dim);
    let mut raw_labels = Vec::new();
    for (line, rec) in body {
        if rec.len() != width {
            return Err(parse_err(*line, format!("expected {width} fields, found {}", rec.len())));
        }
        for (c, cell) in rec.iter().enumerate() {
            if Some(c) == label_idx {
                raw_labels.push(cell.to_string());
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(*line, format!("column {c}: {cell:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(*line, format!("column {c}: non-finite value")));
            }
            data.push(v);
        }
    }
    let n = body.len();
    let points = PointSet::new(n, dim, data)?;
    let (labels, class_count) = if label_idx.is_some() {
        let mut seen: Vec<String> = Vec::new();
        let ids = raw_labels
            .into_iter()
            .map(|l| match seen.iter().position(|s| *s == l) {
                Some(p) => p,
                None => {
                    seen.push(l);
                    seen.len() - 1
                }
            })
            .collect();
        (Some(ids), seen.len())
    } else {
        (None, 0)
    };
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(LabeledDataset {
        name,
        points,
        labels,
        class_count,
    })
}

/// Per-column z-scores; constant columns are only centred.
pub fn standardize(points: &PointSet) -> Result<PointSet> {
    let (n, d) = (points.rows() as f64, points.dim());
    let mut mean = vec![0.0; d];
    for r in points.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for r in points.iter_rows() {
        for k in 0..d {
            sd[k] += (r[k] - mean[k]).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    points.map_rows(|src, dst| {
        for k in 0..d {
            dst[k] = (src[k] - mean[k]) / sd[k];
        }
    })
}

/// Assignment of sample indices to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<usize>>,
    pub heterogeneity: f64,
    pub seed: u64,
}

impl PartitionPlan {
    /// True when the lists are disjoint and cover `0..n`.
    pub fn is_exact_partition(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.clients.iter().flatten() {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

/// Splits `ds` over `m` clients. With `het = h > 0` client `k` first draws
/// `round(h * quota_k)` samples from its dominant classes (class `c` is
/// dominant for client `c mod m`; a client with no class of its own takes
/// class `k mod classes`), then every client fills the rest of its quota
/// uniformly from what is left.
pub fn partition_clients(ds: &LabeledDataset, m: usize, het: f64, seed: u64) -> Result<PartitionPlan> {
    let n = ds.points.rows();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("need 1 <= clients <= n, got {m}")));
    }
    if !(0.0..1.0).contains(&het) {
        return Err(Error::invalid(format!("heterogeneity must be in [0, 1), got {het}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quotas: Vec<usize> = (0..m).map(|k| n / m + usize::from(k < n % m)).collect();
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut taken = vec![false; n];

    if het > 0.0 {
        let labels = ds
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("heterogeneous partitioning needs labels"))?;
        let classes = ds.class_count.max(1);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for pool in by_class.iter_mut() {
            pool.shuffle(&mut rng);
        }
        let mut cursor = vec![0usize; classes];
        for k in 0..m {
            let mut dominant: Vec<usize> = (0..classes).filter(|c| c % m == k).collect();
            if dominant.is_empty() {
                dominant.push(k % classes);
            }
            let want = (het * quotas[k] as f64).round() as usize;
            let mut got = 0;
            while got < want {
                let mut progressed = false;
                for &c in &dominant {
                    if got == want {
                        break;
                    }
                    while cursor[c] < by_class[c].len() && taken[by_class[c][cursor[c]]] {
                        cursor[c] += 1;
                    }
                    if let Some(&i) = by_class[c].get(cursor[c]) {
                        taken[i] = true;
                        clients[k].push(i);
                        got += 1;
                        progressed = true;
                    }
                }
                if !progressed {
                    log::warn!(
                        "client {k}: dominant classes exhausted after {got} of {want} samples; filling uniformly"
                    );
                    break;
                }
            }
        }
    }

    let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    rest.shuffle(&mut rng);
    let mut it = rest.into_iter();
    for k in 0..m {
        while clients[k].len() < quotas[k] {
            match it.next() {
                Some(i) => clients[k].push(i),
                None => break,
            }
        }
        clients[k].sort_unstable();
    }
    Ok(PartitionPlan {
        clients,
        heterogeneity: het,
        seed,
    })
}
