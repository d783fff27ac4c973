//! Supervised contrastive loss and softmax cross-entropy.

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Tolerance on `‖z_i‖₂ = 1` accepted by [`ContrastiveBatch::new`].
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Unit-norm projections with labels and a temperature.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch<'a, T> {
    z: &'a Tensor<T>,
    labels: &'a [usize],
    temperature: f64,
}

impl<'a, T: Real> ContrastiveBatch<'a, T> {
    pub fn new(z: &'a Tensor<T>, labels: &'a [usize], temperature: f64) -> Result<Self> {
        check_inputs(z, labels, temperature)?;
        let (n, _) = z.dims2()?;
        for i in 0..n {
            let norm = z.row(i).iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Contract(format!(
                    "projection row {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(ContrastiveBatch {
            z,
            labels,
            temperature,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LossResult<T> {
    pub value: f64,
    pub per_anchor: Vec<f64>,
    /// Anchors with at least one positive; the mean runs over these.
    pub anchors: usize,
    pub grad: Tensor<T>,
}

fn check_inputs<T: Real>(z: &Tensor<T>, labels: &[usize], temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (n, _) = z.dims2()?;
    if n < 2 {
        return Err(Error::Parameter(format!(
            "contrastive loss needs at least 2 samples, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} projections",
            labels.len()
        )));
    }
    Ok(())
}

pub fn supervised_contrastive_loss<T: Real>(batch: &ContrastiveBatch<'_, T>) -> Result<LossResult<T>> {
    supervised_contrastive_loss_unchecked(batch.z, batch.labels, batch.temperature)
}

/// Supervised contrastive loss without the unit-norm check.
///
/// For anchor `i` with positives `P(i) = {j ≠ i : y_j = y_i}`:
/// `L_i = −1/|P(i)| Σ_{j∈P(i)} log softmax_{k≠i}(⟨z_i, z_k⟩/τ)_j`.
/// Anchors with empty `P(i)` contribute 0 and are left out of the mean.
/// Accumulation is in `f64` regardless of `T`.
pub fn supervised_contrastive_loss_unchecked<T: Real>(
    z: &Tensor<T>,
    labels: &[usize],
    temperature: f64,
) -> Result<LossResult<T>> {
    check_inputs(z, labels, temperature)?;
    let (n, d) = z.dims2()?;
    let zf: Vec<f64> = z.data().iter().map(|v| v.f64()).collect();
    let row = |i: usize| &zf[i * d..(i + 1) * d];
    let mut logits = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            if i != k {
                let dot: f64 = row(i).iter().zip(row(k)).map(|(a, b)| a * b).sum();
                logits[i * n + k] = dot / temperature;
            }
        }
    }

    let mut per_anchor = vec![0.0; n];
    // coef[i][k] = ∂L_i/∂s_ik before the outer 1/A factor
    let mut coef = vec![0.0; n * n];
    let mut anchors = 0;
    for i in 0..n {
        let positives = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        anchors += 1;
        let s = &logits[i * n..(i + 1) * n];
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| s[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = (0..n).filter(|&k| k != i).map(|k| (s[k] - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let inv_p = 1.0 / positives as f64;
        let mut li = 0.0;
        for k in 0..n {
            if k == i {
                continue;
            }
            let p = (s[k] - lse).exp();
            let is_pos = labels[k] == labels[i];
            if is_pos {
                li -= inv_p * (s[k] - lse);
            }
            coef[i * n + k] = p - if is_pos { inv_p } else { 0.0 };
        }
        per_anchor[i] = li;
    }

    let mut grad = vec![0.0; n * d];
    let value = if anchors == 0 {
        0.0
    } else {
        let scale = 1.0 / (anchors as f64 * temperature);
        for i in 0..n {
            for k in 0..n {
                let c = coef[i * n + k];
                if c == 0.0 {
                    continue;
                }
                let c = c * scale;
                for t in 0..d {
                    grad[i * d + t] += c * zf[k * d + t];
                    grad[k * d + t] += c * zf[i * d + t];
                }
            }
        }
        per_anchor.iter().sum::<f64>() / anchors as f64
    };
    Ok(LossResult {
        value,
        per_anchor,
        anchors,
        grad: Tensor::new(vec![n, d], grad.into_iter().map(T::of).collect())?,
    })
}

#[derive(Debug, Clone)]
pub struct CrossEntropy<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

/// Mean of `−log softmax(logits)[label]`; gradient is `(softmax − onehot)/N`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<CrossEntropy<T>> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::Parameter("cross-entropy over an empty batch".into()));
    }
    let mut grad = Tensor::zeros(&[n, c]);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Parameter(format!(
                "label {y} out of range for {c} classes (row {r})"
            )));
        }
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
        for (k, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let g = (p - if k == y { 1.0 } else { 0.0 }) / n as f64;
            grad.data_mut()[r * c + k] = T::of(g);
        }
    }
    Ok(CrossEntropy {
        value: total / n as f64,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()
    }

    #[test]
    fn identical_pair_is_zero() {
        let z = z(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let b = ContrastiveBatch::new(&z, &[0, 0], 1.0).unwrap();
        assert!(supervised_contrastive_loss(&b).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn no_positives_is_zero() {
        let z = z(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = supervised_contrastive_loss_unchecked(&z, &[0, 1], 1.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.anchors, 0);
        assert!(r.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_orthogonal_classes() {
        let z = z(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let r = supervised_contrastive_loss_unchecked(&z, &[0, 0, 1, 1], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((r.value - ((e + 2.0) / e).ln()).abs() < 1e-12);
        for li in &r.per_anchor {
            assert!((li - r.value).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let good = z(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            ContrastiveBatch::new(&good, &[0, 0], 0.0),
            Err(Error::Parameter(_))
        ));
        let long = z(&[&[2.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            ContrastiveBatch::new(&long, &[0, 0], 0.1),
            Err(Error::Contract(_))
        ));
        let single = z(&[&[1.0, 0.0]]);
        assert!(ContrastiveBatch::new(&single, &[0], 0.1).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let c = 5;
        let u = Tensor::<f64>::zeros(&[3, c]);
        let r = softmax_cross_entropy(&u, &[0, 2, 4]).unwrap();
        assert!((r.value - (c as f64).ln()).abs() < 1e-12);

        let l = Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let r = softmax_cross_entropy(&l, &[0]).unwrap();
        assert!((r.value - 4f64.ln()).abs() < 1e-12);

        let mut prev = f64::INFINITY;
        for m in [0.0, 5.0, 10.0, 20.0] {
            let l = Tensor::new(vec![1, 3], vec![m, 0.0, 0.0]).unwrap();
            let v = softmax_cross_entropy(&l, &[0]).unwrap().value;
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-8);

        assert!(softmax_cross_entropy(&u, &[0, 5, 1]).is_err());
    }
}
