//! Finite-difference gradient suite over every substrate op, the projection
//! head, both objectives and a two-block encoder.
//!
//! Scalar-valued checks use `L = Σ r ⊙ f(x)` with a random `r`. Each sampled
//! coordinate is compared against a central difference with step `h`. The
//! error is `|analytic − numeric| / s`, where `s` is the tensor's largest
//! analytic entry floored at 1e-3 of the largest entry over all tensors of
//! the case; the floor keeps gradients that vanish identically (a bias in
//! front of batch norm) from turning rounding noise into relative error.
//! A coordinate whose central differences at `h` and `h/2` disagree sits
//! next to a kink (ReLU at 0, a pooling near-tie) and is skipped.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::model::graph::{self, encoder_layers, projection_layers};
use crate::model::{init_params, EncoderConfig, Mode, ModelConfig, ModelParams, ProjectionConfig};
use crate::nn::ops;
use crate::nn::{BnMode, ConvGeometry, Real, Tensor, BN_EPS, L2_EPS};
use crate::objective::{softmax_cross_entropy, supervised_contrastive_loss_unchecked};
use crate::seed::rng_for;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE_F64: f64 = 1e-4;
pub const TOLERANCE_F32: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            trials: 20,
            coords_per_tensor: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub trials: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.checked > 0
    }
}

type LossFn<'a> = Box<dyn Fn(&[Tensor<f64>]) -> Result<f64> + 'a>;

struct Case<'a> {
    vars: Vec<Tensor<f64>>,
    analytic: Vec<Tensor<f64>>,
    loss: LossFn<'a>,
}

#[derive(Default)]
struct Tally {
    checked: usize,
    skipped: usize,
    max_err: f64,
}

fn central(loss: &LossFn<'_>, vars: &mut [Tensor<f64>], v: usize, i: usize, h: f64) -> Result<f64> {
    let x0 = vars[v].data()[i];
    vars[v].data_mut()[i] = x0 + h;
    let fp = loss(vars)?;
    vars[v].data_mut()[i] = x0 - h;
    let fm = loss(vars)?;
    vars[v].data_mut()[i] = x0;
    Ok((fp - fm) / (2.0 * h))
}

fn compare(case: Case<'_>, coords: usize, rng: &mut ChaCha8Rng, tally: &mut Tally) -> Result<()> {
    let Case {
        mut vars,
        analytic,
        loss,
    } = case;
    let inf = |t: &Tensor<f64>| t.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let case_scale = analytic.iter().map(inf).fold(0.0, f64::max);
    for v in 0..vars.len() {
        let scale = inf(&analytic[v]).max(1e-3 * case_scale).max(1e-12);
        let len = vars[v].len();
        let picks: Vec<usize> = if len <= coords {
            (0..len).collect()
        } else {
            (0..coords).map(|_| rng.random_range(0..len)).collect()
        };
        for i in picks {
            let full = central(&loss, &mut vars, v, i, STEP)?;
            let half = central(&loss, &mut vars, v, i, STEP / 2.0)?;
            if (full - half).abs() > 1e-6 * scale.max(full.abs()) {
                tally.skipped += 1;
                continue;
            }
            let err = (analytic[v].data()[i] - full).abs() / scale;
            tally.max_err = tally.max_err.max(err);
            tally.checked += 1;
        }
    }
    Ok(())
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Values pushed at least `margin` away from zero.
fn away_from_zero(t: &mut Tensor<f64>, margin: f64) {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { *v - margin } else { *v + margin };
        }
    }
}

fn case_conv(rng: &mut ChaCha8Rng) -> Result<Case<'static>> {
    let side = rng.random_range(5..=7);
    let geometry = ConvGeometry {
        stride: rng.random_range(1..=2),
        padding: rng.random_range(0..=1),
    };
    let x = normal(rng, &[2, 2, side, side], 1.0);
    let w = normal(rng, &[3, 2, 3, 3], 0.5);
    let b = normal(rng, &[3], 0.5);
    let (y, ctx) = ops::conv2d(&x, &w, &b, geometry)?;
    let r = normal(rng, y.shape(), 1.0);
    let g = ops::conv2d_backward(ctx, &w, &r)?;
    Ok(Case {
        vars: vec![x, w, b],
        analytic: vec![g.input, g.weight, g.bias],
        loss: Box::new(move |v| Ok(dot(&ops::conv2d(&v[0], &v[1], &v[2], geometry)?.0, &r))),
    })
}

fn case_maxpool(rng: &mut ChaCha8Rng) -> Result<Case<'static>> {
    let side = rng.random_range(4..=5);
    let x = normal(rng, &[2, 2, side, side], 1.0);
    let (y, ctx) = ops::maxpool2d(&x)?;
    let r = normal(rng, y.shape(), 1.0);
    let g = ops::maxpool2d_backward(ctx, &r)?;
    Ok(Case {
        vars: vec![x],
        analytic: vec![g],
        loss: Box::new(move |v| Ok(dot(&ops::maxpool2d(&v[0])?.0, &r))),
    })
}

fn case_batchnorm(rng: &mut ChaCha8Rng, mode: BnMode) -> Result<Case<'static>> {
    let c = 2;
    let x = normal(rng, &[3, c, 3, 3], 1.5);
    let gamma = Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5));
    let beta = normal(rng, &[c], 0.5);
    let rm = normal(rng, &[c], 0.3);
    let rv = Tensor::from_fn(&[c], |_| rng.random_range(0.5..2.0));
    let out = ops::batchnorm2d(&x, &gamma, &beta, &rm, &rv, mode, 0.1, BN_EPS)?;
    let r = normal(rng, out.output.shape(), 1.0);
    let g = ops::batchnorm2d_backward(out.ctx, &r)?;
    Ok(Case {
        vars: vec![x, gamma, beta],
        analytic: vec![g.input, g.gamma, g.beta],
        loss: Box::new(move |v| {
            let o = ops::batchnorm2d(&v[0], &v[1], &v[2], &rm, &rv, mode, 0.1, BN_EPS)?;
            Ok(dot(&o.output, &r))
        }),
    })
}

fn case_relu(rng: &mut ChaCha8Rng) -> Result<Case<'static>> {
    let mut x = normal(rng, &[3, 7], 1.0);
    away_from_zero(&mut x, 0.05);
    let (y, ctx) = ops::relu(&x);
    let r = normal(rng, y.shape(), 1.0);
    let g = ops::relu_backward(ctx, &r);
    Ok(Case {
        vars: vec![x],
        analytic: vec![g],
        loss: Box::new(move |v| Ok(dot(&ops::relu(&v[0]).0, &r))),
    })
}

fn case_dense(rng: &mut ChaCha8Rng) -> Result<Case<'static>> {
    let x = normal(rng, &[3, 4], 1.0);
    let w = normal(rng, &[4, 5], 0.5);
    let b = normal(rng, &[5], 0.5);
    let (y, ctx) = ops::dense(&x, &w, &b)?;
    let r = normal(rng, y.shape(), 1.0);
    let g = ops::dense_backward(ctx, &w, &r)?;
    Ok(Case {
        vars: vec![x, w, b],
        analytic: vec![g.input, g.weight, g.bias],
        loss: Box::new(move |v| Ok(dot(&ops::dense(&v[0], &v[1], &v[2])?.0, &r))),
    })
}

fn case_gap(rng: &mut ChaCha8Rng) -> Result<Case<'static>> {
    let x = normal(rng, &[2, 3, 3, 3], 1.0);
    let (y, ctx) = ops::global_avg_pool(&x)?;
    let r = normal(rng, y.shape(), 1.0);
    let g = ops::global_avg_pool_backward(ctx, &r);
    Ok(Case {
        vars: vec![x],
        analytic: vec![g],
        loss: Box::new(move |v| Ok(dot(&ops::global_avg_pool(&v[0])?.0, &r))),
    })
}

fn case_l2(rng: &mut ChaCha8Rng) -> Result<Case<'static>> {
    let x = normal(rng, &[3, 5], 1.0);
    let (y, ctx) = ops::l2_normalize(&x, L2_EPS)?;
    let r = normal(rng, y.shape(), 1.0);
    let g = ops::l2_normalize_backward(ctx, &r)?;
    Ok(Case {
        vars: vec![x],
        analytic: vec![g],
        loss: Box::new(move |v| Ok(dot(&ops::l2_normalize(&v[0], L2_EPS)?.0, &r))),
    })
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    // guarantee at least one anchor with a positive
    labels[1] = labels[0];
    labels
}

fn case_contrastive(rng: &mut ChaCha8Rng) -> Result<Case<'static>> {
    let n = rng.random_range(4..=12);
    let (z, _) = ops::l2_normalize(&normal(rng, &[n, 4], 1.0), L2_EPS)?;
    let labels = random_labels(rng, n, 3);
    let tau = rng.random_range(0.1..1.0);
    let r = supervised_contrastive_loss_unchecked(&z, &labels, tau)?;
    Ok(Case {
        vars: vec![z],
        analytic: vec![r.grad],
        loss: Box::new(move |v| Ok(supervised_contrastive_loss_unchecked(&v[0], &labels, tau)?.value)),
    })
}

fn case_cross_entropy(rng: &mut ChaCha8Rng) -> Result<Case<'static>> {
    let logits = normal(rng, &[4, 5], 2.0);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    let r = softmax_cross_entropy(&logits, &labels)?;
    Ok(Case {
        vars: vec![logits],
        analytic: vec![r.grad],
        loss: Box::new(move |v| Ok(softmax_cross_entropy(&v[0], &labels)?.value)),
    })
}

/// Two-block encoder used by the end-to-end checks.
pub fn mini_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            filters: vec![4, 6],
            in_channels: 1,
            stem_kernel: 3,
            stem_stride: 1,
            stem_padding: 1,
            kernel: 3,
            pooled_blocks: 1,
        },
        projection: ProjectionConfig { hidden: 5, output: 4 },
        classes: 3,
    }
}

/// Initial parameters with every trainable tensor perturbed, so that biases
/// and batch-norm affines are not at their special initial values.
fn perturbed_params(model: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ModelParams<f64>> {
    let mut p: ModelParams<f64> = init_params(model, rng.random())?.cast();
    let names: Vec<String> = p.names().cloned().collect();
    for name in names {
        if crate::model::is_running_stat(&name) {
            continue;
        }
        let t = p.get_mut(&name)?;
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += 0.1 * z;
        }
    }
    Ok(p)
}

fn trainable_names(params: &ModelParams<f64>, prefixes: &[&str]) -> Vec<String> {
    params
        .names()
        .filter(|n| !crate::model::is_running_stat(n) && prefixes.iter().any(|p| n.starts_with(p)))
        .cloned()
        .collect()
}

fn with_vars(base: &ModelParams<f64>, names: &[String], vars: &[Tensor<f64>]) -> ModelParams<f64> {
    let mut p = base.clone();
    for (n, t) in names.iter().zip(vars) {
        p.insert(n.clone(), t.clone());
    }
    p
}

fn case_projection(rng: &mut ChaCha8Rng) -> Result<Case<'static>> {
    let model = mini_model();
    let params = perturbed_params(&model, rng)?;
    let names = trainable_names(&params, &["projection."]);
    let h = normal(rng, &[6, model.encoder.embedding_dim()], 1.0);
    let layers = projection_layers();
    let fwd = graph::forward(&layers, &params, vec![h.clone()], Mode::train(), true)?;
    let r = normal(rng, fwd.outputs[0].shape(), 1.0);
    let back = graph::backward(fwd.tape.expect("recorded"), &params, vec![r.clone()])?;
    let mut vars = vec![h];
    let mut analytic = vec![back.input_grads[0].clone()];
    for n in &names {
        vars.push(params.get(n)?.clone());
        analytic.push(back.shard_grads[0][n].clone());
    }
    Ok(Case {
        vars,
        analytic,
        loss: Box::new(move |v| {
            let p = with_vars(&params, &names, &v[1..]);
            Ok(dot(&graph::run(&layers, &p, &v[0], Mode::train())?, &r))
        }),
    })
}

struct EndToEnd {
    params: ModelParams<f64>,
    names: Vec<String>,
    x: Tensor<f64>,
    labels: Vec<usize>,
    tau: f64,
    layers: Vec<graph::Layer>,
}

fn end_to_end(rng: &mut ChaCha8Rng) -> Result<EndToEnd> {
    let model = mini_model();
    let params = perturbed_params(&model, rng)?;
    let names = trainable_names(&params, &["encoder.", "projection."]);
    let n = 6;
    let x = Tensor::from_fn(&[n, 1, 6, 6], |_| rng.random_range(0.0..1.0));
    let labels = random_labels(rng, n, 3);
    let mut layers = encoder_layers(&model);
    layers.extend(projection_layers());
    Ok(EndToEnd {
        params,
        names,
        x,
        labels,
        tau: rng.random_range(0.2..1.0),
        layers,
    })
}

/// Analytic gradients of the loss through encoder and projection head.
fn end_to_end_grads<T: Real>(e: &EndToEnd) -> Result<Vec<Tensor<f64>>> {
    let params: ModelParams<T> = e.params.cast();
    let fwd = graph::forward(&e.layers, &params, vec![e.x.cast()], Mode::train(), true)?;
    let loss = supervised_contrastive_loss_unchecked(&fwd.outputs[0], &e.labels, e.tau)?;
    let back = graph::backward(fwd.tape.expect("recorded"), &params, vec![loss.grad])?;
    let mut out = vec![back.input_grads[0].cast()];
    for n in &e.names {
        out.push(back.shard_grads[0][n].cast());
    }
    Ok(out)
}

fn case_end_to_end<T: Real>(rng: &mut ChaCha8Rng) -> Result<Case<'static>> {
    let e = end_to_end(rng)?;
    // The 32-bit case compares against differences of the same model at the
    // same (f32-representable) point.
    let e = EndToEnd {
        params: e.params.cast::<T>().cast(),
        x: e.x.cast::<T>().cast(),
        ..e
    };
    let analytic = end_to_end_grads::<T>(&e)?;
    let mut vars = vec![e.x.clone()];
    for n in &e.names {
        vars.push(e.params.get(n)?.clone());
    }
    Ok(Case {
        vars,
        analytic,
        loss: Box::new(move |v| {
            let p = with_vars(&e.params, &e.names, &v[1..]);
            let z = graph::run(&e.layers, &p, &v[0], Mode::train())?;
            Ok(supervised_contrastive_loss_unchecked(&z, &e.labels, e.tau)?.value)
        }),
    })
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<Case<'static>>;

fn suite() -> Vec<(&'static str, CaseFn, f64)> {
    vec![
        ("conv2d", case_conv as CaseFn, TOLERANCE_F64),
        ("maxpool2d", case_maxpool, TOLERANCE_F64),
        ("batchnorm2d_train", |r| case_batchnorm(r, BnMode::Train), TOLERANCE_F64),
        ("batchnorm2d_eval", |r| case_batchnorm(r, BnMode::Eval), TOLERANCE_F64),
        ("relu", case_relu, TOLERANCE_F64),
        ("dense", case_dense, TOLERANCE_F64),
        ("global_avg_pool", case_gap, TOLERANCE_F64),
        ("l2_normalize", case_l2, TOLERANCE_F64),
        ("supcon_loss", case_contrastive, TOLERANCE_F64),
        ("cross_entropy", case_cross_entropy, TOLERANCE_F64),
        ("projection_head", case_projection, TOLERANCE_F64),
        ("encoder_loss_f64", case_end_to_end::<f64>, TOLERANCE_F64),
        ("encoder_loss_f32", case_end_to_end::<f32>, TOLERANCE_F32),
    ]
}

pub fn op_names() -> Vec<&'static str> {
    suite().into_iter().map(|(n, _, _)| n).collect()
}

/// Runs every check; `on_report` sees each op as it finishes.
pub fn run_suite(cfg: &GradcheckConfig, mut on_report: impl FnMut(&OpReport)) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for (k, (name, make, tol)) in suite().into_iter().enumerate() {
        let mut tally = Tally::default();
        for trial in 0..cfg.trials {
            let mut rng = rng_for(cfg.seed, &[0x6C, k as u64, trial as u64]);
            let case = make(&mut rng)?;
            compare(case, cfg.coords_per_tensor, &mut rng, &mut tally)?;
        }
        let report = OpReport {
            op: name,
            trials: cfg.trials,
            checked: tally.checked,
            skipped: tally.skipped,
            max_rel_error: tally.max_err,
            tolerance: tol,
        };
        on_report(&report);
        out.push(report);
    }
    Ok(out)
}

/// Runs the suite and returns the reports with elapsed seconds.
pub fn run_timed(cfg: &GradcheckConfig) -> Result<(Vec<OpReport>, f64)> {
    let t = Instant::now();
    let r = run_suite(cfg, |_| {})?;
    Ok((r, t.elapsed().as_secs_f64()))
}
