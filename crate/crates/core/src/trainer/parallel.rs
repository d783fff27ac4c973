//! Synchronous K-worker data parallelism simulated over shards of one batch.
//!
//! Every worker runs the same layer stack on its shard. The loss is computed
//! on the gathered outputs, each worker backpropagates `K · ∂L/∂(its rows)`,
//! and the K worker gradients are mean-reduced in ascending worker order.
//! The mean of the scaled per-worker gradients is the gradient of the global
//! loss.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::graph::{self, Layer};
use crate::model::{Gradients, Mode, ModelParams};
use crate::nn::Tensor;
use crate::objective::{softmax_cross_entropy, supervised_contrastive_loss};
use crate::objective::ContrastiveBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Contrastive { temperature: f64 },
    CrossEntropy,
}

pub struct StepOutput {
    pub loss: f64,
    /// Mean of the worker gradients.
    pub grads: Gradients<f32>,
    pub shard_grads: Vec<Gradients<f32>>,
    /// New running statistics for every batch-norm layer in the stack.
    pub bn_updates: BTreeMap<String, Tensor<f32>>,
    /// Gathered layer-stack outputs.
    pub outputs: Tensor<f32>,
}

/// Splits the leading dimension into `k` equal contiguous shards.
pub fn shard(batch: &Tensor<f32>, k: usize) -> Result<Vec<Tensor<f32>>> {
    let n = batch.shape()[0];
    if k == 0 || !n.is_multiple_of(k) {
        return Err(Error::Config(format!(
            "batch of {n} cannot be split across {k} workers"
        )));
    }
    let m = n / k;
    Ok((0..k).map(|w| batch.slice_outer(w * m, (w + 1) * m)).collect())
}

/// Arithmetic mean of per-worker gradients, accumulated in `f64` in worker order.
pub fn mean_reduce(shard_grads: &[Gradients<f32>]) -> Gradients<f32> {
    let k = shard_grads.len() as f64;
    let mut out = BTreeMap::new();
    for name in shard_grads[0].keys() {
        let shape = shard_grads[0][name].shape().to_vec();
        let len = shard_grads[0][name].len();
        let mut acc = vec![0.0f64; len];
        for g in shard_grads {
            for (a, &v) in acc.iter_mut().zip(g[name].data()) {
                *a += v as f64;
            }
        }
        let data = acc.into_iter().map(|a| (a / k) as f32).collect();
        out.insert(name.clone(), Tensor::new(shape, data).expect("shape matches"));
    }
    out
}

/// Loss and its gradient with respect to the gathered outputs.
pub fn objective_value(objective: Objective, outputs: &Tensor<f32>, labels: &[usize]) -> Result<(f64, Tensor<f32>)> {
    match objective {
        Objective::Contrastive { temperature } => {
            let batch = ContrastiveBatch::new(outputs, labels, temperature)?;
            let r = supervised_contrastive_loss(&batch)?;
            Ok((r.value, r.grad))
        }
        Objective::CrossEntropy => {
            let r = softmax_cross_entropy(outputs, labels)?;
            Ok((r.value, r.grad))
        }
    }
}

/// One synchronous step over `workers` shards. Parameters are not modified.
pub fn data_parallel_step(
    layers: &[Layer],
    params: &ModelParams<f32>,
    inputs: &Tensor<f32>,
    labels: &[usize],
    objective: Objective,
    workers: usize,
    mode: Mode,
) -> Result<StepOutput> {
    if labels.len() != inputs.shape()[0] {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            inputs.shape()[0]
        )));
    }
    let shards = shard(inputs, workers)?;
    let fwd = graph::forward(layers, params, shards, mode, true)?;
    let outputs = Tensor::concat_outer(&fwd.outputs)?;
    let (loss, grad) = objective_value(objective, &outputs, labels)?;
    let mut upstream = shard(&grad, workers)?;
    for u in &mut upstream {
        u.scale(workers as f32);
    }
    let tape = fwd.tape.expect("recorded forward");
    let back = graph::backward(tape, params, upstream)?;
    Ok(StepOutput {
        loss,
        grads: mean_reduce(&back.shard_grads),
        shard_grads: back.shard_grads,
        bn_updates: fwd.bn_updates,
        outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn mean_reduce_in_order() {
        let mut a = BTreeMap::new();
        a.insert("w".to_string(), t(&[1.0, 2.0]));
        let mut b = BTreeMap::new();
        b.insert("w".to_string(), t(&[3.0, 6.0]));
        let m = mean_reduce(&[a, b]);
        assert_eq!(m["w"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn uneven_split_rejected() {
        let x = Tensor::<f32>::zeros(&[6, 2]);
        assert!(shard(&x, 4).is_err());
        assert_eq!(shard(&x, 3).unwrap().len(), 3);
    }
}
