//! Flat `key=value` run configuration with named presets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augment::AugmentRanges;
use crate::error::{Error, Result};
use crate::model::{BnSync, EncoderConfig, ModelConfig, ProjectionConfig};
use crate::optim::{scaled_lr, OptimConfig, TrustMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Contrastive,
    Probe,
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Lars,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub arm: Arm,
    pub contrastive_epochs: usize,
    pub probe_epochs: usize,
    pub scratch_epochs: usize,
    pub batch_size: usize,
    pub workers: usize,
    pub bn_sync: BnSync,
    pub bn_momentum: f64,
    pub temperature: f64,
    /// `None` applies the batch-size rule.
    pub lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_eps: f64,
    pub trust_ratio: bool,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub input_side: usize,
    pub max_shift_mm: f64,
    pub augment: bool,
    pub unsharp: bool,
    /// Patches per class per epoch; 0 uses the mean train-split class size.
    pub samples_per_class: usize,
    pub projection_dim: usize,
    pub corpus: PathBuf,
    pub split: PathBuf,
    /// Parameters of a pretrained model (probe arm).
    pub pretrained: PathBuf,
    pub clusters: usize,
    pub top_labels: usize,
    pub out: PathBuf,
}

/// Keys that do not affect results and are left out of the config hash.
const UNHASHED: &[&str] = &["out"];

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk = TrainConfig {
            preset,
            arm: Arm::Contrastive,
            contrastive_epochs: 10,
            probe_epochs: 5,
            scratch_epochs: 15,
            batch_size: 64,
            workers: 1,
            bn_sync: BnSync::ShardLocal,
            bn_momentum: 0.1,
            temperature: 0.07,
            lr: None,
            momentum: 0.9,
            weight_decay: 0.0,
            trust_eps: 1e-9,
            trust_ratio: true,
            optimizer: OptimizerKind::Lars,
            seed: 7,
            input_side: 32,
            max_shift_mm: 0.016,
            augment: true,
            unsharp: false,
            samples_per_class: 0,
            projection_dim: 128,
            corpus: PathBuf::from("corpus"),
            split: PathBuf::from("corpus/split.json"),
            pretrained: PathBuf::new(),
            clusters: 10,
            top_labels: 3,
            out: PathBuf::from("runs"),
        };
        match preset {
            Preset::Desk => desk,
            Preset::Canonical => TrainConfig {
                contrastive_epochs: 150,
                probe_epochs: 30,
                scratch_epochs: 180,
                batch_size: 4096,
                workers: 32,
                input_side: 1129,
                max_shift_mm: 0.2,
                ..desk
            },
        }
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    pub fn canonical() -> Self {
        Self::preset(Preset::Canonical)
    }

    pub fn encoder(&self) -> EncoderConfig {
        match self.preset {
            Preset::Desk => EncoderConfig::desk(),
            Preset::Canonical => EncoderConfig::canonical(),
        }
    }

    pub fn model(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder(),
            projection: ProjectionConfig {
                hidden: self.projection_dim,
                output: self.projection_dim,
            },
            classes,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or_else(|| scaled_lr(self.batch_size))
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            trust_eps: self.trust_eps,
            trust: if self.trust_ratio {
                TrustMode::Adaptive
            } else {
                TrustMode::Unit
            },
            ..OptimConfig::lars(self.learning_rate())
        }
    }

    pub fn augment_ranges(&self) -> AugmentRanges {
        AugmentRanges {
            max_shift_mm: self.max_shift_mm,
            unsharp: self.unsharp,
            ..AugmentRanges::default()
        }
    }

    pub fn epochs(&self) -> usize {
        match self.arm {
            Arm::Contrastive => self.contrastive_epochs,
            Arm::Probe => self.probe_epochs,
            Arm::Scratch => self.scratch_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scratch_epochs != self.contrastive_epochs + self.probe_epochs {
            return Err(Error::Config(format!(
                "scratch-epochs ({}) must equal contrastive-epochs + probe-epochs ({} + {})",
                self.scratch_epochs, self.contrastive_epochs, self.probe_epochs
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch-size must be at least 2, got {}", self.batch_size)));
        }
        if !self.batch_size.is_multiple_of(self.workers) {
            return Err(Error::Config(format!(
                "batch-size {} is not divisible by workers {}",
                self.batch_size, self.workers
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if let Some(lr) = self.lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("lr must be non-negative, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn-momentum must lie in [0, 1], got {}", self.bn_momentum)));
        }
        if !(self.max_shift_mm >= 0.0) {
            return Err(Error::Config(format!("max-shift-mm must be non-negative, got {}", self.max_shift_mm)));
        }
        if self.clusters == 0 || self.top_labels == 0 {
            return Err(Error::Config("clusters and top-labels must be positive".into()));
        }
        if self.projection_dim == 0 {
            return Err(Error::Config("projection-dim must be positive".into()));
        }
        self.encoder().shape_trace(self.input_side)?;
        Ok(())
    }

    /// Every key with its resolved value, in key order.
    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        let p = |p: &Path| p.display().to_string();
        m.insert("preset", preset_name(self.preset).to_string());
        m.insert("arm", arm_name(self.arm).to_string());
        m.insert("contrastive-epochs", self.contrastive_epochs.to_string());
        m.insert("probe-epochs", self.probe_epochs.to_string());
        m.insert("scratch-epochs", self.scratch_epochs.to_string());
        m.insert("batch-size", self.batch_size.to_string());
        m.insert("workers", self.workers.to_string());
        m.insert(
            "bn-sync",
            match self.bn_sync {
                BnSync::ShardLocal => "local",
                BnSync::Synchronized => "sync",
            }
            .to_string(),
        );
        m.insert("bn-momentum", self.bn_momentum.to_string());
        m.insert("temperature", self.temperature.to_string());
        m.insert("lr", self.lr.map_or_else(|| "auto".to_string(), |v| v.to_string()));
        m.insert("momentum", self.momentum.to_string());
        m.insert("weight-decay", self.weight_decay.to_string());
        m.insert("trust-eps", self.trust_eps.to_string());
        m.insert("trust-ratio", self.trust_ratio.to_string());
        m.insert(
            "optimizer",
            match self.optimizer {
                OptimizerKind::Lars => "lars",
                OptimizerKind::Sgd => "sgd",
            }
            .to_string(),
        );
        m.insert("seed", self.seed.to_string());
        m.insert("input-side", self.input_side.to_string());
        m.insert("max-shift-mm", self.max_shift_mm.to_string());
        m.insert("augment", self.augment.to_string());
        m.insert("unsharp", self.unsharp.to_string());
        m.insert("samples-per-class", self.samples_per_class.to_string());
        m.insert("projection-dim", self.projection_dim.to_string());
        m.insert("corpus", p(&self.corpus));
        m.insert("split", p(&self.split));
        m.insert("pretrained", p(&self.pretrained));
        m.insert("clusters", self.clusters.to_string());
        m.insert("top-labels", self.top_labels.to_string());
        m.insert("out", p(&self.out));
        m
    }

    pub fn keys() -> Vec<&'static str> {
        Self::desk().to_pairs().into_keys().collect()
    }

    /// Sets one key. `preset` is handled by [`TrainConfig::from_pairs`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "arm" => {
                self.arm = match v {
                    "contrastive" => Arm::Contrastive,
                    "probe" => Arm::Probe,
                    "scratch" => Arm::Scratch,
                    _ => return Err(bad(key, v, "contrastive, probe or scratch")),
                }
            }
            "contrastive-epochs" => self.contrastive_epochs = num(key, v)?,
            "probe-epochs" => self.probe_epochs = num(key, v)?,
            "scratch-epochs" => self.scratch_epochs = num(key, v)?,
            "batch-size" => self.batch_size = num(key, v)?,
            "workers" => self.workers = num(key, v)?,
            "bn-sync" => {
                self.bn_sync = match v {
                    "local" => BnSync::ShardLocal,
                    "sync" => BnSync::Synchronized,
                    _ => return Err(bad(key, v, "local or sync")),
                }
            }
            "bn-momentum" => self.bn_momentum = num(key, v)?,
            "temperature" => self.temperature = num(key, v)?,
            "lr" => self.lr = if v == "auto" { None } else { Some(num(key, v)?) },
            "momentum" => self.momentum = num(key, v)?,
            "weight-decay" => self.weight_decay = num(key, v)?,
            "trust-eps" => self.trust_eps = num(key, v)?,
            "trust-ratio" => self.trust_ratio = num(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "lars" => OptimizerKind::Lars,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(bad(key, v, "lars or sgd")),
                }
            }
            "seed" => self.seed = num(key, v)?,
            "input-side" => self.input_side = num(key, v)?,
            "max-shift-mm" => self.max_shift_mm = num(key, v)?,
            "augment" => self.augment = num(key, v)?,
            "unsharp" => self.unsharp = num(key, v)?,
            "samples-per-class" => self.samples_per_class = num(key, v)?,
            "projection-dim" => self.projection_dim = num(key, v)?,
            "corpus" => self.corpus = PathBuf::from(v),
            "split" => self.split = PathBuf::from(v),
            "pretrained" => self.pretrained = PathBuf::from(v),
            "clusters" => self.clusters = num(key, v)?,
            "top-labels" => self.top_labels = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "preset" => {
                if parse_preset(v)? != self.preset {
                    return Err(Error::Config("`preset` must be applied before other keys".into()));
                }
            }
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Builds a config from ordered layers of pairs; later layers win. The
    /// preset is taken from the last layer that names one.
    pub fn from_layers(layers: &[Vec<(String, String)>]) -> Result<Self> {
        let mut preset = Preset::Desk;
        for (k, v) in layers.iter().flatten() {
            if k == "preset" {
                preset = parse_preset(v)?;
            }
        }
        let mut cfg = Self::preset(preset);
        for (k, v) in layers.iter().flatten() {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        Self::from_layers(&[pairs.to_vec()])
    }

    /// `key=value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1))
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// SHA-256 over the canonical text of result-relevant keys.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_pairs()
            .into_iter()
            .filter(|(k, _)| !UNHASHED.contains(k))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Desk => "desk",
        Preset::Canonical => "canonical",
    }
}

pub fn arm_name(a: Arm) -> &'static str {
    match a {
        Arm::Contrastive => "contrastive",
        Arm::Probe => "probe",
        Arm::Scratch => "scratch",
    }
}

fn parse_preset(v: &str) -> Result<Preset> {
    match v.trim() {
        "desk" => Ok(Preset::Desk),
        "canonical" => Ok(Preset::Canonical),
        _ => Err(bad("preset", v, "desk or canonical")),
    }
}

fn bad(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!("`{key}`: expected {expected}, got `{value}`"))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}
