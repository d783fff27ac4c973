//! Deterministic 2-d export: projection onto the top two principal axes.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const POWER_ITERATIONS: usize = 100;

fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| m[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn orthogonalize(v: &mut [f64], against: &[Vec<f64>]) {
    for u in against {
        let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
    }
}

/// Leading eigenvector of a symmetric PSD matrix restricted to the complement
/// of `found`, or `None` when that complement carries no variance.
fn power_iteration(cov: &[f64], d: usize, found: &[Vec<f64>], seed: u64, axis: u64) -> Option<Vec<f64>> {
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace <= 0.0 {
        return None;
    }
    let mut rng = rng_for(seed, &[0xE16, axis]);
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    orthogonalize(&mut v, found);
    let n0 = norm(&v);
    if n0 == 0.0 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n0);
    for _ in 0..POWER_ITERATIONS {
        let mut w = matvec(cov, &v);
        orthogonalize(&mut w, found);
        let nw = norm(&w);
        if nw <= 1e-10 * trace {
            return None;
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Some(v)
}

/// Mean-centered projection onto the top-2 principal directions.
/// Zero-variance directions give zero coordinates.
pub fn embed_2d(features: &[Vec<f64>], seed: u64) -> Result<Vec<[f64; 2]>> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Parameter(format!("2-d embedding needs at least 2 points, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature rows differ in length".into()));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for x in &centered {
        for i in 0..d {
            if x[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i * d + j] += x[i] * x[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);

    let mut axes: Vec<Option<Vec<f64>>> = Vec::with_capacity(2);
    let mut found: Vec<Vec<f64>> = Vec::new();
    for axis in 0..2u64 {
        let v = power_iteration(&cov, d, &found, seed, axis);
        if let Some(v) = &v {
            found.push(v.clone());
        }
        axes.push(v);
    }
    let project = |axis: &Option<Vec<f64>>, x: &[f64]| match axis {
        Some(v) => x.iter().zip(v).map(|(a, b)| a * b).sum(),
        None => 0.0,
    };
    let mut coords: Vec<[f64; 2]> = centered
        .iter()
        .map(|x| [project(&axes[0], x), project(&axes[1], x)])
        .collect();
    let var = |k: usize| coords.iter().map(|c| c[k] * c[k]).sum::<f64>();
    if var(1) > var(0) {
        coords.iter_mut().for_each(|c| c.swap(0, 1));
    }
    Ok(coords)
}
