mod common;

use std::collections::BTreeMap;

use supcon::corpus::{Corpus, SplitSpec};
use supcon::model::graph::{backward, encoder_layers, forward, head_layers, projection_layers};
use supcon::model::{init_params, BnSync, Gradients, Layer, Mode, ModelConfig, ModelParams};
use supcon::nn::Tensor;
use supcon::objective::softmax_cross_entropy;
use supcon::optim::{OptimConfig, OptimState};
use supcon::trainer::{
    data_parallel_step, fit_linear_head, load_checkpoint, predict, pretrain_contrastive, save_checkpoint,
    train_probe, train_scratch, Checkpoint, Objective, RunOptions, TrainConfig,
};

fn tiny_cfg(contrastive: usize, probe: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.contrastive_epochs = contrastive;
    cfg.probe_epochs = probe;
    cfg.scratch_epochs = contrastive + probe;
    cfg.batch_size = 16;
    cfg.samples_per_class = 4;
    cfg.seed = 19;
    cfg
}

fn tiny_corpus() -> (Corpus, SplitSpec) {
    common::small_corpus(4, 12, 19)
}

fn scratch_layers(model: &ModelConfig) -> Vec<Layer> {
    let mut l = encoder_layers(model);
    l.extend(head_layers());
    l
}

fn contrastive_layers(model: &ModelConfig) -> Vec<Layer> {
    let mut l = encoder_layers(model);
    l.extend(projection_layers());
    l
}

fn batch(seed: u64, n: usize) -> (Tensor<f32>, Vec<usize>) {
    let mut rng = common::rng(seed);
    let x = common::normal_tensor(&mut rng, &[n, 1, 32, 32]).cast::<f32>();
    (x, common::random_labels(&mut rng, n, 4))
}

fn max_grad_diff(a: &Gradients<f32>, b: &Gradients<f32>) -> f64 {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    a.iter().map(|(k, t)| t.max_abs_diff(&b[k])).fold(0.0, f64::max)
}

fn train_mode(sync: BnSync) -> Mode {
    Mode::Train { sync, momentum: 0.1 }
}

#[test]
fn single_worker_is_the_plain_step() {
    let model = TrainConfig::desk().model(4);
    let params = init_params(&model, 1).unwrap();
    let layers = scratch_layers(&model);
    let (x, y) = batch(1, 8);
    let mode = train_mode(BnSync::ShardLocal);
    let out = data_parallel_step(&layers, &params, &x, &y, Objective::CrossEntropy, 1, mode).unwrap();

    let fwd = forward(&layers, &params, vec![x], mode, true).unwrap();
    let ce = softmax_cross_entropy(&fwd.outputs[0], &y).unwrap();
    let back = backward(fwd.tape.unwrap(), &params, vec![ce.grad]).unwrap();
    assert_eq!(out.loss, ce.value);
    assert_eq!(max_grad_diff(&out.grads, &back.shard_grads[0]), 0.0);
}

#[test]
fn identical_shards_match_one_worker() {
    let model = TrainConfig::desk().model(4);
    let params = init_params(&model, 2).unwrap();
    let (half, y) = batch(2, 4);
    let x = Tensor::concat_outer(&[half.clone(), half.clone()]).unwrap();
    let labels: Vec<usize> = y.iter().chain(&y).copied().collect();
    let mode = train_mode(BnSync::ShardLocal);
    for (layers, objective) in [
        (scratch_layers(&model), Objective::CrossEntropy),
        (contrastive_layers(&model), Objective::Contrastive { temperature: 0.07 }),
    ] {
        let one = data_parallel_step(&layers, &params, &x, &labels, objective, 1, mode).unwrap();
        let two = data_parallel_step(&layers, &params, &x, &labels, objective, 2, mode).unwrap();
        assert!((one.loss - two.loss).abs() < 1e-6);
        assert!(max_grad_diff(&one.grads, &two.grads) < 1e-6);
        for (k, v) in &one.bn_updates {
            assert!(v.max_abs_diff(&two.bn_updates[k]) < 1e-6, "{k}");
        }
    }
}

#[test]
fn reduced_gradient_is_mean_of_serial_shards() {
    let model = TrainConfig::desk().model(4);
    let params = init_params(&model, 3).unwrap();
    let layers = scratch_layers(&model);
    let (x, y) = batch(3, 16);
    let mode = train_mode(BnSync::ShardLocal);
    let reduced = data_parallel_step(&layers, &params, &x, &y, Objective::CrossEntropy, 4, mode).unwrap();

    // Each shard on its own, as a one-worker step; cross-entropy is a mean so
    // the global gradient is the average of the per-shard gradients.
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for k in 0..4 {
        let xs = x.slice_outer(4 * k, 4 * k + 4);
        let ys = &y[4 * k..4 * k + 4];
        let g = data_parallel_step(&layers, &params, &xs, ys, Objective::CrossEntropy, 1, mode)
            .unwrap()
            .grads;
        for (name, t) in g {
            let slot = acc.entry(name).or_insert_with(|| vec![0.0; t.len()]);
            slot.iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b as f64 / 4.0);
        }
    }
    for (name, t) in &reduced.grads {
        let diff = t
            .data()
            .iter()
            .zip(&acc[name])
            .map(|(&a, b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "{name}: {diff}");
    }
}

#[test]
fn uneven_shards_are_rejected() {
    let model = TrainConfig::desk().model(4);
    let params = init_params(&model, 3).unwrap();
    let (x, y) = batch(4, 6);
    let err = data_parallel_step(&scratch_layers(&model), &params, &x, &y, Objective::CrossEntropy, 4, Mode::train());
    assert!(err.is_err());
}

#[test]
fn synchronized_bn_four_workers_match_one() {
    let (corpus, split) = tiny_corpus();
    let mut cfg = tiny_cfg(3, 0);
    cfg.bn_sync = BnSync::Synchronized;
    let one = pretrain_contrastive(&cfg, &corpus, &split, &RunOptions::default()).unwrap();
    cfg.workers = 4;
    let four = pretrain_contrastive(&cfg, &corpus, &split, &RunOptions::default()).unwrap();
    assert_eq!(one.optim.step, 3);
    let diff = one.params.max_abs_diff(&four.params);
    assert!(diff < 1e-5, "max abs difference {diff}");
}

#[test]
fn checkpoint_round_trip_and_hash_guard() {
    let (corpus, split) = tiny_corpus();
    let cfg = tiny_cfg(1, 0);
    let out = pretrain_contrastive(&cfg, &corpus, &split, &RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let ck = Checkpoint {
        params: out.params.clone(),
        model: out.model.clone(),
        optim: out.optim.clone(),
        log: out.log.clone(),
        epochs_done: 1,
        config_hash: cfg.hash(),
    };
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path, &cfg.hash()).unwrap();
    assert_eq!(back.params.content_hash(), out.params.content_hash());
    assert_eq!(back.optim, out.optim);
    assert_eq!(back.log.hash(), out.log.hash());
    assert!(load_checkpoint(&path, "0000").is_err());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (corpus, split) = tiny_corpus();
    let cfg = tiny_cfg(4, 0);
    let full = pretrain_contrastive(&cfg, &corpus, &split, &RunOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.bin");
    let first = RunOptions {
        checkpoint: Some(ck.clone()),
        stop_after: Some(2),
        ..RunOptions::default()
    };
    let partial = pretrain_contrastive(&cfg, &corpus, &split, &first).unwrap();
    assert_eq!(partial.log.records.len(), 2);
    let second = RunOptions {
        resume: Some(ck),
        ..RunOptions::default()
    };
    let resumed = pretrain_contrastive(&cfg, &corpus, &split, &second).unwrap();
    assert_eq!(resumed.params.max_abs_diff(&full.params), 0.0);
    assert_eq!(resumed.params.content_hash(), full.params.content_hash());
    assert_eq!(resumed.optim, full.optim);
    assert_eq!(resumed.log.hash(), full.log.hash());
}

#[test]
fn zero_epochs_return_initial_params() {
    let (corpus, split) = tiny_corpus();
    let cfg = tiny_cfg(0, 0);
    let out = pretrain_contrastive(&cfg, &corpus, &split, &RunOptions::default()).unwrap();
    let init = supcon::trainer::initial_params(&cfg, &out.model).unwrap();
    assert_eq!(out.params.content_hash(), init.content_hash());
    assert!(out.log.records.is_empty());

    let probe = train_probe(&cfg, &corpus, &split, &out.params, &RunOptions::default()).unwrap();
    assert_eq!(probe.params.subset("head.").content_hash(), init.subset("head.").content_hash());
}

#[test]
fn probe_never_touches_the_encoder() {
    let (corpus, split) = tiny_corpus();
    let cfg = tiny_cfg(1, 2);
    let pre = pretrain_contrastive(&cfg, &corpus, &split, &RunOptions::default()).unwrap();
    let probe = train_probe(&cfg, &corpus, &split, &pre.params, &RunOptions::default()).unwrap();
    for prefix in ["encoder.", "projection."] {
        assert_eq!(
            probe.params.subset(prefix).content_hash(),
            pre.params.subset(prefix).content_hash()
        );
    }
    assert_ne!(probe.params.subset("head.").content_hash(), pre.params.subset("head.").content_hash());
}

#[test]
fn linear_head_fits_separable_features() {
    let model = TrainConfig::desk().model(4);
    let mut head: ModelParams<f32> = init_params(&model, 5).unwrap().subset("head.");
    let mut rng = common::rng(5);
    let n = 64;
    let labels = common::random_labels(&mut rng, n, 4);
    let noise = common::normal_vec(&mut rng, n * 128);
    let data: Vec<f32> = (0..n * 128)
        .map(|i| {
            let (r, d) = (i / 128, i % 128);
            let signal = if d == labels[r] { 2.0 } else { 0.0 };
            (signal + 0.1 * noise[i]) as f32
        })
        .collect();
    let features = Tensor::new(vec![n, 128], data).unwrap();
    let mut state = OptimState::new(OptimConfig::lars(0.1));
    let losses = fit_linear_head(&features, &labels, &mut head, &mut state, 30, 16, 5).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);
    let logits = supcon::model::linear_head_forward(&head, &features).unwrap();
    let hits = (0..n)
        .filter(|&r| {
            supcon::evaluate::argmax(&logits.row(r).iter().map(|&v| v as f64).collect::<Vec<_>>()) == labels[r]
        })
        .count();
    assert_eq!(hits, n);
}

#[test]
fn scratch_beats_chance_and_is_deterministic() {
    let (corpus, split) = common::small_corpus(3, 40, 23);
    let mut cfg = tiny_cfg(3, 2);
    cfg.batch_size = 30;
    cfg.samples_per_class = 20;
    cfg.seed = 23;
    let a = train_scratch(&cfg, &corpus, &split, &RunOptions::default()).unwrap();
    let b = train_scratch(&cfg, &corpus, &split, &RunOptions::default()).unwrap();
    assert_eq!(a.log.hash(), b.log.hash());
    assert_eq!(a.params.content_hash(), b.params.content_hash());
    assert!(a.log.records.iter().all(|r| r.loss.is_finite()));

    let train = split.train_entries(&corpus.manifest);
    let pred = predict(&a.params, &a.model, &corpus, &train, cfg.input_side).unwrap();
    let top1 = pred.metrics().unwrap().top1;
    assert!(top1 > 1.0 / 3.0, "train top-1 {top1}");
}

#[test]
fn mismatched_model_is_rejected_by_probe() {
    let (corpus, split) = tiny_corpus();
    let cfg = tiny_cfg(0, 1);
    let other = init_params(&TrainConfig::desk().model(7), 0).unwrap();
    assert!(train_probe(&cfg, &corpus, &split, &other, &RunOptions::default()).is_err());
}
