//! Shared fixtures and independent reference implementations for tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use supcon::corpus::{generate_synthetic_corpus, split_by_section, Corpus, SplitSpec, SynthConfig};
use supcon::nn::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n)).unwrap()
}

/// Rows normalized to unit length.
pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    let mut data = normal_vec(rng, n * d);
    for r in 0..n {
        let row = &mut data[r * d..(r + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(vec![n, d], data).unwrap()
}

/// Random orthonormal `d×d` matrix (row-major) by Gram–Schmidt.
pub fn orthonormal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v = normal_vec(rng, d);
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    q.concat()
}

/// `x · Qᵀ` for an `n×d` row matrix.
pub fn rotate_rows(x: &[f64], n: usize, d: usize, q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        for i in 0..d {
            out[r * d + i] = (0..d).map(|j| q[i * d + j] * x[r * d + j]).sum();
        }
    }
    out
}

pub fn small_corpus(classes: usize, per_class: usize, seed: u64) -> (Corpus, SplitSpec) {
    let cfg = SynthConfig {
        classes,
        per_class,
        side: 64,
        brains: 2,
        sections_per_brain: 5,
        seed,
        resolution_um: 2.0,
    };
    let corpus = generate_synthetic_corpus(&cfg).unwrap();
    let split = split_by_section(&corpus.manifest, 0.8, None, seed).unwrap();
    (corpus, split)
}

// ---------------------------------------------------------------- oracles

/// Accuracy of the nearest class-mean classifier on raw pixels, fitted and
/// scored on the same patches.
pub fn nearest_centroid_accuracy(corpus: &Corpus) -> f64 {
    let c = corpus.class_count();
    let n = corpus.len();
    let dim = corpus.patch(0).patch.pixels().len();
    let mut means = vec![vec![0.0f64; dim]; c];
    let mut counts = vec![0usize; c];
    for i in 0..n {
        let p = corpus.patch(i);
        counts[p.label] += 1;
        for (m, &v) in means[p.label].iter_mut().zip(p.patch.pixels()) {
            *m += v as f64;
        }
    }
    for (m, &k) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= k.max(1) as f64);
    }
    let mut correct = 0;
    for i in 0..n {
        let p = corpus.patch(i);
        let best = (0..c)
            .map(|k| {
                let d: f64 = means[k]
                    .iter()
                    .zip(p.patch.pixels())
                    .map(|(a, &b)| (a - b as f64).powi(2))
                    .sum();
                (d, k)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1;
        if best == p.label {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

fn sse(points: &[Vec<f64>], members: &[usize]) -> f64 {
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for &m in members {
        mean.iter_mut().zip(&points[m]).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= members.len() as f64);
    members
        .iter()
        .map(|&m| points[m].iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum()
}

/// Greedy minimum-variance agglomeration recomputing every candidate merge
/// cost from the raw points. Returns the final partition (as sorted member
/// lists) and the merge costs in order.
pub fn brute_force_ward(points: &[Vec<f64>], k: usize) -> (BTreeSet<Vec<usize>>, Vec<f64>) {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    let mut costs = Vec::new();
    while clusters.len() > k {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let mut merged = clusters[i].clone();
                merged.extend(&clusters[j]);
                let delta = sse(points, &merged) - sse(points, &clusters[i]) - sse(points, &clusters[j]);
                if delta < best.0 {
                    best = (delta, i, j);
                }
            }
        }
        let (cost, i, j) = best;
        let b = clusters.remove(j);
        clusters[i].extend(b);
        clusters[i].sort_unstable();
        costs.push(cost);
    }
    (clusters.into_iter().collect(), costs)
}

/// Brute-force minimum within-cluster SSE over all 2-partitions.
pub fn best_two_partition(points: &[Vec<f64>]) -> BTreeSet<Vec<usize>> {
    let n = points.len();
    let mut best = (f64::INFINITY, 0u32);
    for mask in 1..(1u32 << n) - 1 {
        let a: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let b: Vec<usize> = (0..n).filter(|i| mask & (1 << i) == 0).collect();
        let v = sse(points, &a) + sse(points, &b);
        if v < best.0 {
            best = (v, mask);
        }
    }
    let a: Vec<usize> = (0..n).filter(|i| best.1 & (1 << i) != 0).collect();
    let b: Vec<usize> = (0..n).filter(|i| best.1 & (1 << i) == 0).collect();
    [a, b].into_iter().collect()
}

pub fn partition_of(assignments: &[usize]) -> BTreeSet<Vec<usize>> {
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    (0..k)
        .map(|c| (0..assignments.len()).filter(|&i| assignments[i] == c).collect())
        .collect()
}

/// Weighted F1 from an explicit confusion matrix.
pub fn brute_weighted_f1(y_true: &[usize], y_pred: &[usize], classes: usize) -> f64 {
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        confusion[t][p] += 1;
    }
    let n = y_true.len() as f64;
    (0..classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let col: usize = (0..classes).map(|r| confusion[r][c]).sum();
            let row: usize = confusion[c].iter().sum();
            let p = if col == 0 { 0.0 } else { tp / col as f64 };
            let r = if row == 0 { 0.0 } else { tp / row as f64 };
            let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            f1 * row as f64 / n
        })
        .sum()
}

/// Top-k accuracy by fully sorting each row (value descending, index ascending).
pub fn brute_topk(logits: &[Vec<f64>], y_true: &[usize], k: usize) -> f64 {
    let hits = logits
        .iter()
        .zip(y_true)
        .filter(|(row, &y)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order[..k].contains(&y)
        })
        .count();
    hits as f64 / logits.len() as f64
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}
