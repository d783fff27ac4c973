//! Sequential layer graphs executed in lockstep over data-parallel shards.
//!
//! A single-shard call is the ordinary forward/backward pass. With several
//! shards every layer except batch norm acts on each shard independently;
//! batch norm either uses shard-local statistics or exchanges sufficient
//! statistics across shards, see [`BnSync`].

use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::params::{bn_name, conv_name, Gradients, ModelParams};
use crate::error::{Error, Result};
use crate::nn::ops::{
    self, batch_statistics, batchnorm_apply, batchnorm_grad_sums, batchnorm_input_grad,
    channel_centered_squares, channel_sums, update_running, BatchNormCtx, Conv2dCtx, DenseCtx,
    GapCtx, L2NormCtx, MaxPoolCtx, ReluCtx,
};
use crate::nn::{BnMode, ConvGeometry, Real, Tensor, BN_EPS, L2_EPS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv { name: String, geometry: ConvGeometry },
    BatchNorm { name: String },
    Relu,
    MaxPool,
    GlobalAvgPool,
    Dense { name: String },
    L2Normalize,
}

/// How batch norm behaves when a batch is split across workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BnSync {
    /// Each worker normalizes with its own shard statistics; running
    /// statistics are updated from the mean of the shard statistics.
    #[default]
    ShardLocal,
    /// Workers exchange sufficient statistics, so every shard is normalized
    /// with global batch statistics (forward and backward).
    Synchronized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Train { sync: BnSync, momentum: f64 },
    Eval,
}

impl Mode {
    pub fn train() -> Self {
        Mode::Train {
            sync: BnSync::ShardLocal,
            momentum: 0.1,
        }
    }
}

pub fn encoder_layers(config: &ModelConfig) -> Vec<Layer> {
    let enc = &config.encoder;
    let mut layers = Vec::new();
    for b in 1..=enc.filters.len() {
        for l in 1..=2 {
            let geometry = if b == 1 && l == 1 {
                enc.stem_geometry()
            } else {
                enc.inner_geometry()
            };
            layers.push(Layer::Conv {
                name: conv_name(b, l),
                geometry,
            });
            layers.push(Layer::BatchNorm { name: bn_name(b, l) });
            layers.push(Layer::Relu);
        }
        if b <= enc.pooled_blocks {
            layers.push(Layer::MaxPool);
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers
}

pub fn projection_layers() -> Vec<Layer> {
    vec![
        Layer::Dense {
            name: "projection.fc1".into(),
        },
        Layer::BatchNorm {
            name: "projection.bn1".into(),
        },
        Layer::Relu,
        Layer::Dense {
            name: "projection.fc2".into(),
        },
        Layer::L2Normalize,
    ]
}

pub fn head_layers() -> Vec<Layer> {
    vec![Layer::Dense {
        name: "head".into(),
    }]
}

enum Ctx<T> {
    Conv(Conv2dCtx<T>),
    Bn(BatchNormCtx<T>),
    Relu(ReluCtx),
    Pool(MaxPoolCtx),
    Gap(GapCtx),
    Dense(DenseCtx<T>),
    L2(L2NormCtx<T>),
}

/// Saved activations of one forward pass; consumed by [`backward`].
pub struct Tape<T> {
    layers: Vec<Layer>,
    mode: Mode,
    entries: Vec<Vec<Ctx<T>>>,
}

pub struct GraphForward<T> {
    pub outputs: Vec<Tensor<T>>,
    /// Present when the forward was recorded.
    pub tape: Option<Tape<T>>,
    /// New running statistics keyed by full parameter name.
    pub bn_updates: BTreeMap<String, Tensor<T>>,
}

pub struct GraphBackward<T> {
    /// Parameter gradients contributed by each shard, in shard order.
    pub shard_grads: Vec<Gradients<T>>,
    pub input_grads: Vec<Tensor<T>>,
}

/// Per-channel mean and biased variance.
type MeanVar = (Vec<f64>, Vec<f64>);

fn bn_stats_for_shards<T: Real>(
    xs: &[Tensor<T>],
    sync: BnSync,
) -> Result<(Vec<MeanVar>, MeanVar)> {
    match sync {
        BnSync::ShardLocal => {
            let per: Vec<_> = xs.iter().map(batch_statistics).collect::<Result<_>>()?;
            let k = per.len() as f64;
            let c = per[0].0.len();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (m, v) in &per {
                for ch in 0..c {
                    mean[ch] += m[ch];
                    var[ch] += v[ch];
                }
            }
            mean.iter_mut().for_each(|m| *m /= k);
            var.iter_mut().for_each(|v| *v /= k);
            Ok((per, (mean, var)))
        }
        BnSync::Synchronized => {
            let mut count = 0;
            let mut sum: Vec<f64> = Vec::new();
            for x in xs {
                let s = channel_sums(x)?;
                count += s.count;
                if sum.is_empty() {
                    sum = s.sum;
                } else {
                    sum.iter_mut().zip(&s.sum).for_each(|(a, b)| *a += b);
                }
            }
            if count < 2 {
                return Err(Error::Statistics(format!(
                    "training-mode batch norm needs at least 2 elements per channel, got {count}"
                )));
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let mut sq = vec![0.0; mean.len()];
            for x in xs {
                let part = channel_centered_squares(x, &mean)?;
                sq.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
            }
            let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
            let per = vec![(mean.clone(), var.clone()); xs.len()];
            Ok((per, (mean, var)))
        }
    }
}

/// Runs `layers` over each shard. `record` keeps the contexts needed for
/// [`backward`].
pub fn forward<T: Real>(
    layers: &[Layer],
    params: &ModelParams<T>,
    shards: Vec<Tensor<T>>,
    mode: Mode,
    record: bool,
) -> Result<GraphForward<T>> {
    if shards.is_empty() {
        return Err(Error::Shape("forward needs at least one shard".into()));
    }
    let mut xs = shards;
    let mut entries = Vec::with_capacity(if record { layers.len() } else { 0 });
    let mut bn_updates = BTreeMap::new();
    for layer in layers {
        let mut next = Vec::with_capacity(xs.len());
        let mut ctxs = Vec::with_capacity(xs.len());
        match layer {
            Layer::Conv { name, geometry } => {
                let w = params.get(&format!("{name}.weight"))?;
                let b = params.get(&format!("{name}.bias"))?;
                for x in &xs {
                    let (y, c) = ops::conv2d(x, w, b, *geometry)?;
                    next.push(y);
                    ctxs.push(Ctx::Conv(c));
                }
            }
            Layer::BatchNorm { name } => {
                let gamma = params.get(&format!("{name}.gamma"))?;
                let beta = params.get(&format!("{name}.beta"))?;
                let rm = params.get(&format!("{name}.running_mean"))?;
                let rv = params.get(&format!("{name}.running_var"))?;
                match mode {
                    Mode::Train { sync, momentum } => {
                        let (per, (mean, var)) = bn_stats_for_shards(&xs, sync)?;
                        for (x, (m, v)) in xs.iter().zip(&per) {
                            let (y, c) = batchnorm_apply(x, m, v, gamma, beta, BN_EPS, BnMode::Train)?;
                            next.push(y);
                            ctxs.push(Ctx::Bn(c));
                        }
                        let running = update_running(rm, rv, &mean, &var, momentum);
                        bn_updates.insert(format!("{name}.running_mean"), running.mean);
                        bn_updates.insert(format!("{name}.running_var"), running.var);
                    }
                    Mode::Eval => {
                        let m: Vec<f64> = rm.data().iter().map(|v| v.f64()).collect();
                        let v: Vec<f64> = rv.data().iter().map(|v| v.f64()).collect();
                        for x in &xs {
                            let (y, c) = batchnorm_apply(x, &m, &v, gamma, beta, BN_EPS, BnMode::Eval)?;
                            next.push(y);
                            ctxs.push(Ctx::Bn(c));
                        }
                    }
                }
            }
            Layer::Relu => {
                for x in &xs {
                    let (y, c) = ops::relu(x);
                    next.push(y);
                    ctxs.push(Ctx::Relu(c));
                }
            }
            Layer::MaxPool => {
                for x in &xs {
                    let (y, c) = ops::maxpool2d(x)?;
                    next.push(y);
                    ctxs.push(Ctx::Pool(c));
                }
            }
            Layer::GlobalAvgPool => {
                for x in &xs {
                    let (y, c) = ops::global_avg_pool(x)?;
                    next.push(y);
                    ctxs.push(Ctx::Gap(c));
                }
            }
            Layer::Dense { name } => {
                let w = params.get(&format!("{name}.weight"))?;
                let b = params.get(&format!("{name}.bias"))?;
                for x in &xs {
                    let (y, c) = ops::dense(x, w, b)?;
                    next.push(y);
                    ctxs.push(Ctx::Dense(c));
                }
            }
            Layer::L2Normalize => {
                for x in &xs {
                    let (y, c) = ops::l2_normalize(x, L2_EPS)?;
                    next.push(y);
                    ctxs.push(Ctx::L2(c));
                }
            }
        }
        if record {
            entries.push(ctxs);
        }
        xs = next;
    }
    Ok(GraphForward {
        outputs: xs,
        tape: record.then(|| Tape {
            layers: layers.to_vec(),
            mode,
            entries,
        }),
        bn_updates,
    })
}

/// Backpropagates one upstream gradient per shard through a recorded tape.
pub fn backward<T: Real>(
    tape: Tape<T>,
    params: &ModelParams<T>,
    upstream: Vec<Tensor<T>>,
) -> Result<GraphBackward<T>> {
    let k = upstream.len();
    let mut shard_grads: Vec<Gradients<T>> = vec![BTreeMap::new(); k];
    let mut gs = upstream;
    let sync = match tape.mode {
        Mode::Train { sync, .. } => sync,
        Mode::Eval => BnSync::ShardLocal,
    };
    for (layer, ctxs) in tape.layers.iter().zip(tape.entries).rev() {
        if ctxs.len() != k {
            return Err(Error::Shape(format!(
                "backward got {k} upstream shards for a {}-shard forward",
                ctxs.len()
            )));
        }
        let mut next = Vec::with_capacity(k);
        match layer {
            Layer::Conv { name, .. } => {
                let w = params.get(&format!("{name}.weight"))?;
                for (s, (ctx, g)) in ctxs.into_iter().zip(&gs).enumerate() {
                    let Ctx::Conv(c) = ctx else { unreachable!() };
                    let grads = ops::conv2d_backward(c, w, g)?;
                    shard_grads[s].insert(format!("{name}.weight"), grads.weight);
                    shard_grads[s].insert(format!("{name}.bias"), grads.bias);
                    next.push(grads.input);
                }
            }
            Layer::BatchNorm { name } => {
                let ctxs: Vec<BatchNormCtx<T>> = ctxs
                    .into_iter()
                    .map(|c| match c {
                        Ctx::Bn(b) => b,
                        _ => unreachable!(),
                    })
                    .collect();
                let sums: Vec<(Vec<f64>, Vec<f64>)> = ctxs
                    .iter()
                    .zip(&gs)
                    .map(|(c, g)| batchnorm_grad_sums(c, g))
                    .collect::<Result<_>>()?;
                let channels = sums[0].0.len();
                let (global_dy, global_dyx, global_count) = if sync == BnSync::Synchronized {
                    let mut a = vec![0.0; channels];
                    let mut b = vec![0.0; channels];
                    for (sd, sdx) in &sums {
                        a.iter_mut().zip(sd).for_each(|(x, y)| *x += y);
                        b.iter_mut().zip(sdx).for_each(|(x, y)| *x += y);
                    }
                    let count = gs.iter().map(|g| g.len() / channels).sum();
                    (Some(a), Some(b), count)
                } else {
                    (None, None, 0)
                };
                for (s, ((ctx, g), (sd, sdx))) in ctxs.iter().zip(&gs).zip(&sums).enumerate() {
                    let dx = match (&global_dy, &global_dyx) {
                        (Some(a), Some(b)) => batchnorm_input_grad(ctx, g, a, b, global_count)?,
                        _ => batchnorm_input_grad(ctx, g, sd, sdx, g.len() / channels)?,
                    };
                    shard_grads[s].insert(
                        format!("{name}.gamma"),
                        Tensor::from_fn(&[channels], |i| T::of(sdx[i])),
                    );
                    shard_grads[s].insert(
                        format!("{name}.beta"),
                        Tensor::from_fn(&[channels], |i| T::of(sd[i])),
                    );
                    next.push(dx);
                }
            }
            Layer::Relu => {
                for (ctx, g) in ctxs.into_iter().zip(&gs) {
                    let Ctx::Relu(c) = ctx else { unreachable!() };
                    next.push(ops::relu_backward(c, g));
                }
            }
            Layer::MaxPool => {
                for (ctx, g) in ctxs.into_iter().zip(&gs) {
                    let Ctx::Pool(c) = ctx else { unreachable!() };
                    next.push(ops::maxpool2d_backward(c, g)?);
                }
            }
            Layer::GlobalAvgPool => {
                for (ctx, g) in ctxs.into_iter().zip(&gs) {
                    let Ctx::Gap(c) = ctx else { unreachable!() };
                    next.push(ops::global_avg_pool_backward(c, g));
                }
            }
            Layer::Dense { name } => {
                let w = params.get(&format!("{name}.weight"))?;
                for (s, (ctx, g)) in ctxs.into_iter().zip(&gs).enumerate() {
                    let Ctx::Dense(c) = ctx else { unreachable!() };
                    let grads = ops::dense_backward(c, w, g)?;
                    shard_grads[s].insert(format!("{name}.weight"), grads.weight);
                    shard_grads[s].insert(format!("{name}.bias"), grads.bias);
                    next.push(grads.input);
                }
            }
            Layer::L2Normalize => {
                for (ctx, g) in ctxs.into_iter().zip(&gs) {
                    let Ctx::L2(c) = ctx else { unreachable!() };
                    next.push(ops::l2_normalize_backward(c, g)?);
                }
            }
        }
        gs = next;
    }
    Ok(GraphBackward {
        shard_grads,
        input_grads: gs,
    })
}

/// Single-shard forward without recording.
pub fn run<T: Real>(
    layers: &[Layer],
    params: &ModelParams<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let mut out = forward(layers, params, vec![input.clone()], mode, false)?;
    Ok(out.outputs.remove(0))
}
