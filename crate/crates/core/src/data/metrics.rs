//! External clustering metrics: Hungarian-matched accuracy, NMI and ARI.

use crate::error::{Error, Result};

fn check(truth: &[usize], pred: &[usize]) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::invalid("metric needs at least one sample"));
    }
    if truth.len() != pred.len() {
        return Err(Error::invalid(format!(
            "label vectors differ in length: {} vs {}",
            truth.len(),
            pred.len()
        )));
    }
    Ok(())
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Contingency counts `table[t][p]` over compacted labels.
fn contingency(truth: &[usize], pred: &[usize]) -> Vec<Vec<u64>> {
    let (t, kt) = compact(truth);
    let (p, kp) = compact(pred);
    let mut table = vec![vec![0u64; kp]; kt];
    for (&a, &b) in t.iter().zip(&p) {
        table[a][b] += 1;
    }
    table
}

/// Minimum-cost perfect assignment on a square cost matrix (Kuhn-Munkres
/// with potentials). Returns `col_for_row`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_for_row = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col_for_row[p[j] - 1] = j - 1;
        }
    }
    col_for_row
}

/// Fraction of samples matched under the best one-to-one map between
/// predicted clusters and true classes.
pub fn hungarian_accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check(truth, pred)?;
    let table = contingency(truth, pred);
    let k = table.len().max(table[0].len());
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|t| {
            (0..k)
                .map(|p| -(table.get(t).and_then(|r| r.get(p)).copied().unwrap_or(0) as f64))
                .collect()
        })
        .collect();
    let assign = min_cost_assignment(&cost);
    let matched: f64 = assign.iter().enumerate().map(|(t, &p)| -cost[t][p]).sum();
    Ok(matched / truth.len() as f64)
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalised mutual information with geometric-mean normalisation.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check(truth, pred)?;
    let table = contingency(truth, pred);
    let n = truth.len() as f64;
    let rows: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..table[0].len()).map(|p| table.iter().map(|r| r[p]).sum()).collect();
    let ht = entropy(rows.iter().copied(), n);
    let hp = entropy(cols.iter().copied(), n);
    if ht == 0.0 || hp == 0.0 {
        return Ok(if ht == hp { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (t, row) in table.iter().enumerate() {
        for (p, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (rows[t] as f64 * cols[p] as f64)).ln();
            }
        }
    }
    Ok((mi / (ht * hp).sqrt()).clamp(0.0, 1.0))
}

fn choose2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index.
pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check(truth, pred)?;
    let table = contingency(truth, pred);
    let sum_cells: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let sum_cols: f64 = (0..table[0].len())
        .map(|p| choose2(table.iter().map(|r| r[p]).sum()))
        .sum();
    let total = choose2(truth.len() as u64);
    let expected = if total > 0.0 { sum_rows * sum_cols / total } else { 0.0 };
    let max_index = 0.5 * (sum_rows + sum_cols);
    let denom = max_index - expected;
    if denom.abs() < 1e-12 {
        let same = table.len() == table[0].len() && table.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1);
        return Ok(if same { 1.0 } else { 0.0 });
    }
    Ok((sum_cells - expected) / denom)
}
