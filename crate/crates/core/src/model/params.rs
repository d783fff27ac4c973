use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};
use crate::seed::rng_for;

/// Named parameter bundle: encoder, projection head and linear head, including
/// batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Kaiming normal with the given fan-in.
    Kaiming(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn push_bn(specs: &mut Vec<ParamSpec>, prefix: &str, channels: usize) {
    for (leaf, init) in [
        ("gamma", Init::Ones),
        ("beta", Init::Zeros),
        ("running_mean", Init::Zeros),
        ("running_var", Init::Ones),
    ] {
        specs.push(ParamSpec {
            name: format!("{prefix}.{leaf}"),
            shape: vec![channels],
            init,
        });
    }
}

fn push_conv(specs: &mut Vec<ParamSpec>, prefix: &str, o: usize, i: usize, k: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![o, i, k, k],
        init: Init::Kaiming(i * k * k),
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![o],
        init: Init::Zeros,
    });
}

fn push_dense(specs: &mut Vec<ParamSpec>, prefix: &str, i: usize, o: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![i, o],
        init: Init::Kaiming(i),
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![o],
        init: Init::Zeros,
    });
}

pub fn conv_name(block: usize, layer: usize) -> String {
    format!("encoder.block{block}.conv{layer}")
}

pub fn bn_name(block: usize, layer: usize) -> String {
    format!("encoder.block{block}.bn{layer}")
}

/// Every parameter tensor implied by a model config, in construction order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let enc = &config.encoder;
    let mut specs = Vec::new();
    let mut in_ch = enc.in_channels;
    for (b, &f) in enc.filters.iter().enumerate() {
        for l in 1..=2 {
            let k = if b == 0 && l == 1 { enc.stem_kernel } else { enc.kernel };
            push_conv(&mut specs, &conv_name(b + 1, l), f, in_ch, k);
            push_bn(&mut specs, &bn_name(b + 1, l), f);
            in_ch = f;
        }
    }
    let de = enc.embedding_dim();
    let proj = &config.projection;
    push_dense(&mut specs, "projection.fc1", de, proj.hidden);
    push_bn(&mut specs, "projection.bn1", proj.hidden);
    push_dense(&mut specs, "projection.fc2", proj.hidden, proj.output);
    push_dense(&mut specs, "head", de, config.classes);
    specs
}

pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Kaiming-normal conv/dense weights, zero biases, unit BN scale.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams<f32>> {
    config.validate()?;
    let mut tensors = BTreeMap::new();
    for spec in param_specs(config) {
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::full(&spec.shape, 1.0),
            Init::Kaiming(fan_in) => {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let mut rng = rng_for(seed, &[name_hash(&spec.name)]);
                Tensor::from_fn(&spec.shape, |_| normal.sample(&mut rng) as f32)
            }
        };
        tensors.insert(spec.name, t);
    }
    Ok(ModelParams { tensors })
}

impl<T: Real> ModelParams<T> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter tensor `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| !is_running_stat(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ModelParams<T> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ModelParams<T>) -> f64 {
        self.tensors
            .iter()
            .map(|(k, v)| match other.tensors.get(k) {
                Some(o) if o.shape() == v.shape() => v.max_abs_diff(o),
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }

    /// Checks names and shapes against a config.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        for spec in param_specs(config) {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter `{}` has shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}

impl ModelParams<f32> {
    /// SHA-256 over names, shapes and little-endian payloads.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
