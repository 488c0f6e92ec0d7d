//! Connected components of the symmetrised support graph.

use serde::{Deserialize, Serialize};

use super::StructuralGraph;

/// Weights at or below this value do not count as edges.
pub const EDGE_TOLERANCE: f64 = 1e-12;

/// Where a globally indexed sample lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub client_id: u32,
    pub local_index: u32,
}

/// Integer cluster labels in `0..cluster_count`, optionally tagged with the
/// client each sample came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub cluster_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<SampleRef>,
}

impl ClusterAssignment {
    pub fn new(labels: Vec<usize>, cluster_count: usize) -> Self {
        Self {
            labels,
            cluster_count,
            provenance: Vec::new(),
        }
    }

    /// Relabels so that labels appear in order of first occurrence and
    /// `cluster_count` equals the number of distinct labels.
    pub fn canonical(labels: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels: Vec<usize> = labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Self::new(labels, map.len())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.cluster_count];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// Components of the graph whose edge `{i, j}` exists when either direction
/// carries weight above [`EDGE_TOLERANCE`]. Labels follow the smallest
/// member index.
pub fn connected_components(g: &StructuralGraph) -> ClusterAssignment {
    let n = g.n();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for &(j, w) in g.row(i) {
            if w > EDGE_TOLERANCE {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    let mut labels = vec![usize::MAX; n];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if labels[start] != usize::MAX {
            continue;
        }
        labels[start] = count;
        stack.push(start);
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if labels[v] == usize::MAX {
                    labels[v] = count;
                    stack.push(v);
                }
            }
        }
        count += 1;
    }
    ClusterAssignment::new(labels, count)
}
