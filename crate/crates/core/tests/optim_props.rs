mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use supcon::model::{Gradients, ModelParams};
use supcon::nn::Tensor;
use supcon::optim::{lars_step, scaled_lr, sgd_step, OptimConfig, OptimState, TrustMode};

fn tensors(seed: u64, shapes: &[(&str, usize)]) -> BTreeMap<String, Tensor<f32>> {
    let mut rng = common::rng(seed);
    shapes
        .iter()
        .map(|&(name, n)| (name.to_string(), common::normal_tensor(&mut rng, &[n]).cast::<f32>()))
        .collect()
}

const SHAPES: &[(&str, usize)] = &[("encoder.block1.conv1.weight", 12), ("head.weight", 7)];

fn plain(lr: f64, momentum: f64, weight_decay: f64, trust: TrustMode) -> OptimConfig {
    OptimConfig {
        lr,
        momentum,
        weight_decay,
        trust_eps: 0.0,
        trust,
        exempt: Vec::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn lars_direction_ignores_gradient_scale(seed in any::<u64>(), scale in 0.01f32..100.0, lr in 0.001f64..1.0) {
        let w0 = ModelParams::from_map(tensors(seed, SHAPES));
        let g: Gradients<f32> = tensors(seed ^ 0xABCD, SHAPES);
        let scaled: Gradients<f32> = g
            .iter()
            .map(|(k, t)| {
                let mut t = t.clone();
                t.scale(scale);
                (k.clone(), t)
            })
            .collect();
        let cfg = plain(lr, 0.0, 0.0, TrustMode::Adaptive);
        let (mut a, mut b) = (w0.clone(), w0.clone());
        lars_step(&mut a, &g, &mut OptimState::new(cfg.clone())).unwrap();
        lars_step(&mut b, &scaled, &mut OptimState::new(cfg)).unwrap();
        for (name, t) in w0.iter() {
            let step_norm = t.max_abs_diff(a.get(name).unwrap()).max(1e-12);
            let gap = a.get(name).unwrap().max_abs_diff(b.get(name).unwrap());
            prop_assert!(gap <= 1e-5 * step_norm.max(t.norm()), "{name}: {gap}");
        }
    }

    #[test]
    fn unit_trust_lars_tracks_sgd(seed in any::<u64>(), lr in 0.001f64..0.5, momentum in 0.0f64..0.95, wd in 0.0f64..0.01) {
        let w0 = ModelParams::from_map(tensors(seed, SHAPES));
        let (mut a, mut b) = (w0.clone(), w0.clone());
        let mut sa = OptimState::new(plain(lr, momentum, wd, TrustMode::Unit));
        let mut sb = OptimState::new(plain(lr, momentum, wd, TrustMode::Unit));
        for step in 0..5u64 {
            let g = tensors(seed.wrapping_add(step + 1), SHAPES);
            lars_step(&mut a, &g, &mut sa).unwrap();
            sgd_step(&mut b, &g, &mut sb).unwrap();
        }
        prop_assert!(a.max_abs_diff(&b) < 1e-5);
    }
}

#[test]
fn scalar_lars_hand_example() {
    let mut w = ModelParams::from_map(BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![2.0f32]).unwrap())]));
    let g = BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![1.0f32]).unwrap())]);
    lars_step(&mut w, &g, &mut OptimState::new(plain(0.1, 0.0, 0.0, TrustMode::Adaptive))).unwrap();
    assert!((w.get("w").unwrap().data()[0] as f64 - 1.8).abs() < 1e-7);
}

#[test]
fn learning_rate_rule() {
    assert_eq!(scaled_lr(4096), 0.32);
    assert_eq!(scaled_lr(128), 0.01);
    assert_eq!(scaled_lr(256), 0.02);
}
