//! Encoder, projection head and linear classifier built from the substrate ops.

pub mod archive;
mod config;
pub mod graph;
mod params;

use std::path::Path;

pub use archive::TensorArchive;
pub use config::{EncoderConfig, ModelConfig, ProjectionConfig};
pub use graph::{BnSync, Layer, Mode};
pub use params::{init_params, is_running_stat, param_specs, Gradients, ModelParams, ParamSpec};

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Maps an `N×C×P×P` batch to features `h: N×D_e`.
pub fn encoder_forward<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    batch: &Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let (_, c, h, w) = batch.dims4()?;
    if h != w || c != config.encoder.in_channels {
        return Err(Error::Shape(format!(
            "encoder expects square {}-channel input, got {:?}",
            config.encoder.in_channels,
            batch.shape()
        )));
    }
    config.encoder.shape_trace(h)?;
    graph::run(&graph::encoder_layers(config), params, batch, mode)
}

/// Projection head `g`; rows of the result have unit norm.
pub fn projection_forward<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    h: &Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let (_, d) = h.dims2()?;
    if d != config.encoder.embedding_dim() {
        return Err(Error::Shape(format!(
            "projection expects {}-dim features, got {d}",
            config.encoder.embedding_dim()
        )));
    }
    graph::run(&graph::projection_layers(), params, h, mode)
}

pub fn linear_head_forward<T: Real>(params: &ModelParams<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    graph::run(&graph::head_layers(), params, h, Mode::Eval)
}

/// Saves parameters with their config and seed for provenance.
pub fn save_params(params: &ModelParams<f32>, config: &ModelConfig, seed: u64, path: &Path) -> Result<()> {
    let mut archive = TensorArchive::default();
    archive.meta.insert(
        "model_config".into(),
        serde_json::to_string(config).expect("config serializes"),
    );
    archive.meta.insert("seed".into(), seed.to_string());
    archive.tensors = params.as_map().clone();
    archive.save(path)
}

pub fn load_params(path: &Path) -> Result<(ModelParams<f32>, ModelConfig, u64)> {
    let archive = TensorArchive::load(path)?;
    let config: ModelConfig = archive
        .meta
        .get("model_config")
        .ok_or_else(|| Error::Checkpoint("missing model_config".into()))
        .and_then(|s| serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string())))?;
    let seed = archive
        .meta
        .get("seed")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing seed".into()))?;
    let params = ModelParams::from_map(archive.tensors);
    params.check_against(&config)?;
    Ok((params, config, seed))
}
