use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{conv_output_extent, ConvGeometry};

/// Convolutional encoder: six blocks of two conv-BN-ReLU layers, 2x2 max
/// pooling after all but the last block, global average pooling on top.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub filters: Vec<usize>,
    pub in_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_padding: usize,
    pub kernel: usize,
    /// Number of leading blocks followed by a pooling layer.
    pub pooled_blocks: usize,
}

impl EncoderConfig {
    pub fn canonical() -> Self {
        EncoderConfig {
            filters: vec![16, 32, 64, 64, 128, 128],
            in_channels: 1,
            stem_kernel: 5,
            stem_stride: 4,
            stem_padding: 2,
            kernel: 3,
            pooled_blocks: 5,
        }
    }

    /// Same layer stack with a stride-1 stem, so that 32-pixel inputs reach a
    /// 1x1 map after the fifth pooling.
    pub fn desk() -> Self {
        EncoderConfig {
            stem_stride: 1,
            ..Self::canonical()
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.filters.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::Config(format!(
                "encoder filters must be non-empty and positive, got {:?}",
                self.filters
            )));
        }
        if self.pooled_blocks > self.filters.len() {
            return Err(Error::Config(format!(
                "pooled_blocks {} exceeds block count {}",
                self.pooled_blocks,
                self.filters.len()
            )));
        }
        if self.stem_stride == 0 || self.stem_kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config("encoder kernels/strides must be positive, inner kernel odd".into()));
        }
        Ok(())
    }

    pub fn stem_geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: self.stem_stride,
            padding: self.stem_padding,
        }
    }

    pub fn inner_geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: 1,
            padding: self.kernel / 2,
        }
    }

    /// Spatial side after the stem convolution and after each pooling layer.
    /// For the canonical config and a 1129-pixel patch this is
    /// `[283, 141, 70, 35, 17, 8]`.
    pub fn shape_trace(&self, side: usize) -> Result<Vec<usize>> {
        let mut trace = Vec::new();
        let fail = |trace: &[usize], what: &str| {
            Error::Shape(format!(
                "input side {side} is incompatible with the encoder ({what}); trace so far: {trace:?}"
            ))
        };
        let mut s = conv_output_extent(side, self.stem_kernel, self.stem_geometry())
            .ok_or_else(|| fail(&trace, "stem convolution"))?;
        trace.push(s);
        for block in 0..self.filters.len() {
            let convs = if block == 0 { 1 } else { 2 };
            for _ in 0..convs {
                s = conv_output_extent(s, self.kernel, self.inner_geometry())
                    .ok_or_else(|| fail(&trace, &format!("block {} convolution", block + 1)))?;
            }
            if block < self.pooled_blocks {
                if s < 2 {
                    return Err(fail(&trace, &format!("pooling after block {}", block + 1)));
                }
                s /= 2;
                trace.push(s);
            }
        }
        Ok(trace)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub hidden: usize,
    pub output: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            hidden: 128,
            output: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projection: ProjectionConfig,
    pub classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.projection.hidden == 0 || self.projection.output == 0 {
            return Err(Error::Config("projection dimensions must be positive".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_traces() {
        let c = EncoderConfig::canonical();
        assert_eq!(c.shape_trace(1129).unwrap(), vec![283, 141, 70, 35, 17, 8]);
        assert_eq!(c.shape_trace(128).unwrap(), vec![32, 16, 8, 4, 2, 1]);
        assert_eq!(c.embedding_dim(), 128);
    }

    #[test]
    fn desk_trace() {
        assert_eq!(
            EncoderConfig::desk().shape_trace(32).unwrap(),
            vec![32, 16, 8, 4, 2, 1]
        );
    }

    #[test]
    fn too_small_input_reports_trace() {
        let err = EncoderConfig::canonical().shape_trace(64).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[16, 8, 4, 2, 1]"), "{msg}");
        assert!(msg.contains("block 5"), "{msg}");
    }
}
