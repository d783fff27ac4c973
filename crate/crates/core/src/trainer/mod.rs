//! The three experimental arms: contrastive pretraining, linear probe on a
//! frozen encoder, and end-to-end training from scratch.

pub mod checkpoint;
pub mod config;
pub mod parallel;

use std::path::PathBuf;
use std::time::Instant;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EpochRecord, RunLog};
pub use config::{Arm, OptimizerKind, Preset, TrainConfig};
pub use parallel::{data_parallel_step, mean_reduce, Objective, StepOutput};

use crate::augment::{apply_pipeline, center_crop, draw_params_with};
use crate::corpus::{sample_balanced_epoch, Corpus, Patch, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluate::MetricBlock;
use crate::model::graph::{encoder_layers, head_layers, projection_layers, Layer};
use crate::model::{encoder_forward, init_params, linear_head_forward, Mode, ModelConfig, ModelParams};
use crate::nn::Tensor;
use crate::optim::{lars_step, sgd_step, OptimState};
use crate::seed::{derive_seed, rng_for};

const TAG_INIT: u64 = 0x1417;
const TAG_EPOCH: u64 = 0xE90C;
const TAG_AUG: u64 = 0xA06;
const EVAL_CHUNK: usize = 64;

/// Optional side effects of a training run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Written atomically after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Append-only `epoch,loss,lr,seconds` log.
    pub log_csv: Option<PathBuf>,
    /// Resume from this checkpoint; its config hash must match.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (for interrupted runs).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub model: ModelConfig,
    pub optim: OptimState,
    pub log: RunLog,
}

fn arm_tag(arm: Arm) -> u64 {
    match arm {
        Arm::Contrastive => 1,
        Arm::Probe => 2,
        Arm::Scratch => 3,
    }
}

pub fn initial_params(cfg: &TrainConfig, model: &ModelConfig) -> Result<ModelParams<f32>> {
    init_params(model, derive_seed(cfg.seed, &[TAG_INIT]))
}

/// Patches per class per epoch: the configured value or the mean class size
/// of the train split.
pub fn samples_per_class(cfg: &TrainConfig, corpus: &Corpus, split: &SplitSpec) -> usize {
    if cfg.samples_per_class > 0 {
        return cfg.samples_per_class;
    }
    let n = split.train_entries(&corpus.manifest).len();
    (n as f64 / corpus.class_count().max(1) as f64).round().max(1.0) as usize
}

/// Augmented (or center-cropped) network input for one sample. The seed
/// depends on the position in the epoch, never on the worker count.
pub fn training_view(cfg: &TrainConfig, source: &Patch, epoch: usize, position: usize) -> Result<Patch> {
    if !cfg.augment {
        return center_crop(source, cfg.input_side);
    }
    let mut rng = rng_for(cfg.seed, &[TAG_AUG, arm_tag(cfg.arm), epoch as u64, position as u64]);
    let params = draw_params_with(&cfg.augment_ranges(), &mut rng);
    apply_pipeline(source, &params, cfg.input_side, cfg.unsharp)
}

fn stack(patches: &[Patch]) -> Result<Tensor<f32>> {
    let side = patches[0].side();
    let mut data = Vec::with_capacity(patches.len() * side * side);
    for p in patches {
        data.extend_from_slice(p.pixels());
    }
    Tensor::new(vec![patches.len(), 1, side, side], data)
}

/// Batch of training views for `indices`, occupying epoch positions
/// `offset..offset + indices.len()`.
pub fn training_batch(
    cfg: &TrainConfig,
    corpus: &Corpus,
    indices: &[usize],
    epoch: usize,
    offset: usize,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut views = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for (j, &i) in indices.iter().enumerate() {
        let lp = corpus.patch(i);
        views.push(training_view(cfg, &lp.patch, epoch, offset + j)?);
        labels.push(lp.label);
    }
    Ok((stack(&views)?, labels))
}

struct Arrangement<'a> {
    layers: Vec<Layer>,
    objective: Objective,
    trainable: &'a [&'a str],
    mode: Mode,
    /// Frozen encoder applied before `layers` (probe arm).
    frozen_encoder: Option<ModelConfig>,
}

fn optimizer_step(cfg: &TrainConfig, params: &mut ModelParams<f32>, grads: &crate::model::Gradients<f32>, state: &mut OptimState) -> Result<()> {
    match cfg.optimizer {
        OptimizerKind::Lars => lars_step(params, grads, state),
        OptimizerKind::Sgd => sgd_step(params, grads, state),
    }
}

fn warnings_for(cfg: &TrainConfig, corpus: &Corpus) -> Vec<String> {
    let c = corpus.class_count();
    if cfg.batch_size < 2 * c {
        vec![format!(
            "batch size {} is below twice the class count {c}; many anchors will lack positives",
            cfg.batch_size
        )]
    } else {
        Vec::new()
    }
}

fn train_loop(
    cfg: &TrainConfig,
    corpus: &Corpus,
    split: &SplitSpec,
    model: &ModelConfig,
    mut params: ModelParams<f32>,
    arrangement: &Arrangement<'_>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    split.validate()?;
    params.check_against(model)?;
    let hash = cfg.hash();
    let mut state = OptimState::new(cfg.optim());
    let mut log = RunLog::new(hash.clone());
    log.warnings = warnings_for(cfg, corpus);
    let mut start_epoch = 0;
    if let Some(path) = &opts.resume {
        let ck = load_checkpoint(path, &hash)?;
        if &ck.model != model {
            return Err(Error::Checkpoint("checkpoint model config differs from the run".into()));
        }
        params = ck.params;
        state = ck.optim;
        log = ck.log;
        start_epoch = ck.epochs_done;
    }
    let epochs = cfg.epochs();
    let per_class = samples_per_class(cfg, corpus, split);
    let n = cfg.batch_size;
    let lr = cfg.learning_rate();
    for epoch in start_epoch..epochs {
        if opts.stop_after.is_some_and(|s| epoch >= s) {
            break;
        }
        let started = Instant::now();
        let order = sample_balanced_epoch(
            &corpus.manifest,
            split,
            per_class,
            derive_seed(cfg.seed, &[TAG_EPOCH, arm_tag(cfg.arm), epoch as u64]),
        )?;
        let steps = order.len() / n;
        if steps == 0 {
            return Err(Error::Config(format!(
                "an epoch of {} samples is smaller than the batch size {n}",
                order.len()
            )));
        }
        let mut loss_sum = 0.0;
        for step in 0..steps {
            let idx = &order[step * n..(step + 1) * n];
            let (images, labels) = training_batch(cfg, corpus, idx, epoch, step * n)?;
            let inputs = match &arrangement.frozen_encoder {
                Some(mc) => encoder_forward(&params, mc, &images, Mode::Eval)?,
                None => images,
            };
            let out = data_parallel_step(
                &arrangement.layers,
                &params,
                &inputs,
                &labels,
                arrangement.objective,
                cfg.workers,
                arrangement.mode,
            )?;
            if !out.loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {} step {} (global step {})",
                    epoch + 1,
                    step + 1,
                    state.step + 1
                )));
            }
            loss_sum += out.loss;
            let grads = out
                .grads
                .into_iter()
                .filter(|(k, _)| arrangement.trainable.iter().any(|p| k.starts_with(p)))
                .collect();
            optimizer_step(cfg, &mut params, &grads, &mut state)?;
            for (k, v) in out.bn_updates {
                if arrangement.trainable.iter().any(|p| k.starts_with(p)) {
                    params.insert(k, v);
                }
            }
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / steps as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log.records.push(record);
        if let Some(p) = &opts.log_csv {
            checkpoint::append_log_line(p, &record)?;
        }
        if let Some(p) = &opts.checkpoint {
            save_checkpoint(
                &Checkpoint {
                    params: params.clone(),
                    model: model.clone(),
                    optim: state.clone(),
                    log: log.clone(),
                    epochs_done: epoch + 1,
                    config_hash: hash.clone(),
                },
                p,
            )?;
        }
    }
    Ok(TrainOutcome {
        params,
        model: model.clone(),
        optim: state,
        log,
    })
}

fn with_arm(cfg: &TrainConfig, arm: Arm) -> TrainConfig {
    TrainConfig { arm, ..cfg.clone() }
}

fn train_mode(cfg: &TrainConfig) -> Mode {
    Mode::Train {
        sync: cfg.bn_sync,
        momentum: cfg.bn_momentum,
    }
}

/// Encoder plus projection head trained with the supervised contrastive loss.
pub fn pretrain_contrastive(cfg: &TrainConfig, corpus: &Corpus, split: &SplitSpec, opts: &RunOptions) -> Result<TrainOutcome> {
    let cfg = with_arm(cfg, Arm::Contrastive);
    let model = cfg.model(corpus.class_count());
    let params = initial_params(&cfg, &model)?;
    let mut layers = encoder_layers(&model);
    layers.extend(projection_layers());
    let arrangement = Arrangement {
        layers,
        objective: Objective::Contrastive {
            temperature: cfg.temperature,
        },
        trainable: &["encoder.", "projection."],
        mode: train_mode(&cfg),
        frozen_encoder: None,
    };
    train_loop(&cfg, corpus, split, &model, params, &arrangement, opts)
}

/// Linear classifier on frozen encoder features. The encoder runs in eval
/// mode and only `head.*` tensors change.
pub fn train_probe(
    cfg: &TrainConfig,
    corpus: &Corpus,
    split: &SplitSpec,
    pretrained: &ModelParams<f32>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    let cfg = with_arm(cfg, Arm::Probe);
    let model = cfg.model(corpus.class_count());
    pretrained.check_against(&model)?;
    let fresh = initial_params(&cfg, &model)?;
    let mut params = pretrained.clone();
    for (k, v) in fresh.subset("head.").iter() {
        params.insert(k.clone(), v.clone());
    }
    let arrangement = Arrangement {
        layers: head_layers(),
        objective: Objective::CrossEntropy,
        trainable: &["head."],
        mode: Mode::Eval,
        frozen_encoder: Some(model.clone()),
    };
    train_loop(&cfg, corpus, split, &model, params, &arrangement, opts)
}

/// Encoder plus linear head trained end to end with cross-entropy.
pub fn train_scratch(cfg: &TrainConfig, corpus: &Corpus, split: &SplitSpec, opts: &RunOptions) -> Result<TrainOutcome> {
    let cfg = with_arm(cfg, Arm::Scratch);
    let model = cfg.model(corpus.class_count());
    let params = initial_params(&cfg, &model)?;
    let mut layers = encoder_layers(&model);
    layers.extend(head_layers());
    let arrangement = Arrangement {
        layers,
        objective: Objective::CrossEntropy,
        trainable: &["encoder.", "head."],
        mode: train_mode(&cfg),
        frozen_encoder: None,
    };
    train_loop(&cfg, corpus, split, &model, params, &arrangement, opts)
}

/// Fits `head.*` by minibatch cross-entropy on fixed features.
pub fn fit_linear_head(
    features: &Tensor<f32>,
    labels: &[usize],
    head: &mut ModelParams<f32>,
    state: &mut OptimState,
    epochs: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    use rand::seq::SliceRandom;
    let (n, _) = features.dims2()?;
    if labels.len() != n || batch == 0 {
        return Err(Error::Shape(format!("{} labels for {n} feature rows", labels.len())));
    }
    let layers = head_layers();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(seed, &[TAG_EPOCH, epoch as u64]));
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch) {
            let d = features.shape()[1];
            let mut x = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                x.extend_from_slice(features.row(i));
            }
            let x = Tensor::new(vec![chunk.len(), d], x)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let out = data_parallel_step(&layers, head, &x, &y, Objective::CrossEntropy, 1, Mode::Eval)?;
            lars_step(head, &out.grads, state)?;
            sum += out.loss;
            steps += 1;
        }
        losses.push(sum / steps as f64);
    }
    Ok(losses)
}

/// Encoder features, classifier logits and labels for a set of patches.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub indices: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Predictions {
    pub fn metrics(&self) -> Result<MetricBlock> {
        MetricBlock::compute(&self.logits, &self.labels)
    }
}

/// Center-cropped eval-mode inference in fixed-size chunks.
pub fn predict(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    corpus: &Corpus,
    indices: &[usize],
    input_side: usize,
) -> Result<Predictions> {
    let mut out = Predictions {
        indices: indices.to_vec(),
        features: Vec::with_capacity(indices.len()),
        logits: Vec::with_capacity(indices.len()),
        labels: Vec::with_capacity(indices.len()),
    };
    for chunk in indices.chunks(EVAL_CHUNK) {
        let mut views = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let lp = corpus.patch(i);
            views.push(center_crop(&lp.patch, input_side)?);
            out.labels.push(lp.label);
        }
        let h = encoder_forward(params, model, &stack(&views)?, Mode::Eval)?;
        let logits = linear_head_forward(params, &h)?;
        for r in 0..chunk.len() {
            out.features.push(h.row(r).iter().map(|&v| v as f64).collect());
            out.logits.push(logits.row(r).iter().map(|&v| v as f64).collect());
        }
    }
    Ok(out)
}
