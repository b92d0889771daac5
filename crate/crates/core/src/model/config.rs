use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width `d` of token representations.
    pub encoder_dim: usize,
    /// Width `h` of the start/end projections.
    pub hidden_size: usize,
    /// Width `r` of span features; also the channel count of every grid
    /// convolution.
    pub biaffine_size: usize,
    pub num_heads: usize,
    /// Width `c` of the span-length embeddings.
    pub length_embed_dim: usize,
    /// Signed offsets `i - j` are clamped to `[-max_offset, max_offset]`.
    pub max_offset: usize,
    /// Residual convolution blocks over the span grid. Zero removes the grid
    /// convolutions entirely, including the final one.
    pub cnn_blocks: usize,
    pub kernel_size: usize,
    pub num_types: usize,
    /// Known tokens of the built-in encoder; one extra row is reserved for
    /// unknown tokens.
    pub vocab_size: usize,
    /// Residual 1-D convolutions in the built-in encoder.
    pub encoder_layers: usize,
    pub encoder_kernel: usize,
    pub leaky_slope: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_dim: 64,
            hidden_size: 64,
            biaffine_size: 32,
            num_heads: 2,
            length_embed_dim: 16,
            max_offset: 64,
            cnn_blocks: 2,
            kernel_size: 3,
            num_types: 1,
            vocab_size: 0,
            encoder_layers: 2,
            encoder_kernel: 3,
            leaky_slope: 0.01,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder_dim", self.encoder_dim),
            ("hidden_size", self.hidden_size),
            ("biaffine_size", self.biaffine_size),
            ("num_heads", self.num_heads),
            ("length_embed_dim", self.length_embed_dim),
            ("kernel_size", self.kernel_size),
            ("num_types", self.num_types),
            ("encoder_kernel", self.encoder_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !self.biaffine_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "biaffine_size {} is not divisible by num_heads {}",
                self.biaffine_size, self.num_heads
            )));
        }
        if self.kernel_size.is_multiple_of(2) || self.encoder_kernel.is_multiple_of(2) {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        if !(self.leaky_slope >= 0.0) {
            return Err(Error::Config("leaky_slope must be non-negative".into()));
        }
        Ok(())
    }

    pub fn head_hidden(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn head_features(&self) -> usize {
        self.biaffine_size / self.num_heads
    }

    pub fn offset_rows(&self) -> usize {
        2 * self.max_offset + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_must_divide_widths() {
        let cfg = ModelConfig {
            hidden_size: 10,
            num_heads: 3,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig {
            biaffine_size: 10,
            num_heads: 4,
            hidden_size: 8,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let cfg = ModelConfig {
            kernel_size: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
    }
}
