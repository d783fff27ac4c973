//! Run logs and resumable checkpoints.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluate::MetricBlock;
use crate::model::{ModelConfig, ModelParams, TensorArchive};
use crate::optim::{OptimConfig, OptimState};

pub const CHECKPOINT_VERSION: &str = "1";
const MOMENTUM_PREFIX: &str = "optim.momentum.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{:.3}", self.epoch, self.loss, self.lr, self.seconds)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub config_hash: String,
    pub records: Vec<EpochRecord>,
    pub metrics: Option<MetricBlock>,
    pub warnings: Vec<String>,
}

pub const RUNLOG_HEADER: &str = "epoch,loss,lr,seconds";

impl RunLog {
    pub fn new(config_hash: impl Into<String>) -> Self {
        RunLog {
            config_hash: config_hash.into(),
            ..Default::default()
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{RUNLOG_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(out, "{}", r.csv_line());
        }
        out
    }

    /// Hash of the config hash and every record's epoch, loss and rate.
    /// Wall time is excluded so that identical runs hash identically.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_hash.as_bytes());
        for r in &self.records {
            h.update((r.epoch as u64).to_le_bytes());
            h.update(r.loss.to_bits().to_le_bytes());
            h.update(r.lr.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn mean_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Appends one record, writing the header first if the file is new.
pub fn append_log_line(path: &Path, record: &EpochRecord) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(RUNLOG_HEADER);
        text.push('\n');
    }
    text.push_str(&record.csv_line());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub model: ModelConfig,
    pub optim: OptimState,
    pub log: RunLog,
    pub epochs_done: usize,
    pub config_hash: String,
}

fn meta_get<'a>(a: &'a TensorArchive, key: &str) -> Result<&'a str> {
    a.meta
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("malformed `{key}`: {v}")))
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut a = TensorArchive::default();
    a.meta.insert("version".into(), CHECKPOINT_VERSION.into());
    a.meta.insert("config_hash".into(), ck.config_hash.clone());
    a.meta.insert("epochs_done".into(), ck.epochs_done.to_string());
    a.meta.insert("optim.step".into(), ck.optim.step.to_string());
    a.meta.insert(
        "optim.config".into(),
        serde_json::to_string(&ck.optim.config).expect("optimizer config serializes"),
    );
    a.meta.insert(
        "model_config".into(),
        serde_json::to_string(&ck.model).expect("model config serializes"),
    );
    for r in &ck.log.records {
        a.meta.insert(
            format!("log.{:06}", r.epoch),
            format!("{:016x} {:016x} {:016x}", r.loss.to_bits(), r.lr.to_bits(), r.seconds.to_bits()),
        );
    }
    for (i, w) in ck.log.warnings.iter().enumerate() {
        a.meta.insert(format!("warning.{i:03}"), w.replace('\n', " "));
    }
    a.tensors = ck.params.as_map().clone();
    for (name, v) in &ck.optim.momentum {
        a.tensors.insert(format!("{MOMENTUM_PREFIX}{name}"), v.clone());
    }
    a.save(path)
}

/// Loads a checkpoint, refusing one written by a different config.
pub fn load_checkpoint(path: &Path, expected_hash: &str) -> Result<Checkpoint> {
    let a = TensorArchive::load(path)?;
    let version = meta_get(&a, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_hash = meta_get(&a, "config_hash")?.to_string();
    if config_hash != expected_hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {config_hash}, current config {expected_hash}"
        )));
    }
    let epochs_done = parse("epochs_done", meta_get(&a, "epochs_done")?)?;
    let step = parse("optim.step", meta_get(&a, "optim.step")?)?;
    let optim_cfg: OptimConfig = serde_json::from_str(meta_get(&a, "optim.config")?)
        .map_err(|e| Error::Checkpoint(format!("optim.config: {e}")))?;
    let model: ModelConfig = serde_json::from_str(meta_get(&a, "model_config")?)
        .map_err(|e| Error::Checkpoint(format!("model_config: {e}")))?;
    let mut log = RunLog::new(config_hash.clone());
    for (k, v) in &a.meta {
        if let Some(ep) = k.strip_prefix("log.") {
            let f: Vec<u64> = v
                .split(' ')
                .map(|s| u64::from_str_radix(s, 16))
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Checkpoint(format!("malformed `{k}`")))?;
            if f.len() != 3 {
                return Err(Error::Checkpoint(format!("malformed `{k}`")));
            }
            log.records.push(EpochRecord {
                epoch: parse(k, ep)?,
                loss: f64::from_bits(f[0]),
                lr: f64::from_bits(f[1]),
                seconds: f64::from_bits(f[2]),
            });
        } else if k.starts_with("warning.") {
            log.warnings.push(v.clone());
        }
    }
    let mut params = std::collections::BTreeMap::new();
    let mut momentum = std::collections::BTreeMap::new();
    for (name, t) in a.tensors {
        match name.strip_prefix(MOMENTUM_PREFIX) {
            Some(p) => {
                momentum.insert(p.to_string(), t);
            }
            None => {
                params.insert(name, t);
            }
        }
    }
    let params = ModelParams::from_map(params);
    params.check_against(&model)?;
    Ok(Checkpoint {
        params,
        model,
        optim: OptimState {
            config: optim_cfg,
            momentum,
            step,
        },
        log,
        epochs_done,
        config_hash,
    })
}
