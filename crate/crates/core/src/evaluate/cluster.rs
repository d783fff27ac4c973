//! Ward agglomerative clustering and cluster-composition tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Slot ids of the merged clusters (`a < b`); the result keeps slot `a`.
    pub a: usize,
    pub b: usize,
    /// Increase of the within-cluster sum of squares caused by the merge.
    pub cost: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    /// Cluster id per item, numbered by first appearance.
    pub assignments: Vec<usize>,
    pub k: usize,
    pub dendrogram: Vec<Merge>,
}

impl ClusterReport {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }
}

/// Agglomerative Ward clustering down to `k` clusters.
///
/// Dissimilarities start at half the squared Euclidean distance, which is the
/// Ward cost of merging two singletons, and are updated with the
/// Lance–Williams recurrence
/// `d(k, i∪j) = ((n_i+n_k)·d(k,i) + (n_j+n_k)·d(k,j) − n_k·d(i,j)) / (n_i+n_j+n_k)`.
/// Ties pick the lexicographically smallest slot pair.
pub fn ward_cluster(features: &[Vec<f64>], k: usize) -> Result<ClusterReport> {
    let n = features.len();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("cluster count {k} outside [1, {n}]")));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("feature rows differ in length".into()));
    }
    let mut d = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let sq: f64 = features[i]
                .iter()
                .zip(&features[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = sq / 2.0;
            d[j * n + i] = sq / 2.0;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut dendrogram = Vec::with_capacity(n - k);
    for _ in 0..n - k {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in (0..n).filter(|&i| active[i]) {
            for j in (i + 1..n).filter(|&j| active[j]) {
                let v = d[i * n + j];
                if best.is_none_or(|(bv, _, _)| v < bv) {
                    best = Some((v, i, j));
                }
            }
        }
        let (cost, a, b) = best.expect("at least two active clusters");
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for m in (0..n).filter(|&m| active[m] && m != a && m != b) {
            let nm = size[m] as f64;
            let v = ((na + nm) * d[m * n + a] + (nb + nm) * d[m * n + b] - nm * cost) / (na + nb + nm);
            d[m * n + a] = v;
            d[a * n + m] = v;
        }
        active[b] = false;
        size[a] += size[b];
        owner.iter_mut().filter(|o| **o == b).for_each(|o| *o = a);
        dendrogram.push(Merge {
            a,
            b,
            cost,
            size: size[a],
        });
    }
    let mut relabel = vec![usize::MAX; n];
    let mut next = 0;
    let assignments = owner
        .iter()
        .map(|&o| {
            if relabel[o] == usize::MAX {
                relabel[o] = next;
                next += 1;
            }
            relabel[o]
        })
        .collect();
    Ok(ClusterReport {
        assignments,
        k,
        dendrogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub cluster: usize,
    pub label: usize,
    pub percent: f64,
}

/// Label percentages per cluster over all labels, most frequent first
/// (ties: lower label id).
pub fn full_composition(report: &ClusterReport, labels: &[usize]) -> Result<Vec<Vec<(usize, f64)>>> {
    if labels.len() != report.assignments.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} clustered items",
            labels.len(),
            report.assignments.len()
        )));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; classes]; report.k];
    for (&c, &l) in report.assignments.iter().zip(labels) {
        counts[c][l] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            let mut entries: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .map(|(l, &n)| (l, 100.0 * n as f64 / total as f64))
                .collect();
            entries.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            entries
        })
        .collect())
}

/// The `top_m` most frequent labels of every cluster.
pub fn cluster_composition(report: &ClusterReport, labels: &[usize], top_m: usize) -> Result<Vec<CompositionRow>> {
    let full = full_composition(report, labels)?;
    Ok(full
        .into_iter()
        .enumerate()
        .flat_map(|(cluster, rows)| {
            rows.into_iter()
                .take(top_m)
                .map(move |(label, percent)| CompositionRow {
                    cluster,
                    label,
                    percent,
                })
        })
        .collect())
}
