use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One convolution block: `conv(kernel, stride, same padding) -> relu ->
/// maxpool(pool)`; a pool of 1 skips pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
}

impl ConvBlock {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, pool: usize) -> Self {
        ConvBlock {
            out_channels,
            kernel,
            stride,
            pool,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub conv_blocks: Vec<ConvBlock>,
    /// Width of the feature vector; must be a perfect square `S * S`.
    pub feature_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub fc_hidden: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-friendly default for 64x64 synthetic data.
    pub fn desk() -> Self {
        ModelConfig {
            input_h: 64,
            input_w: 64,
            conv_blocks: vec![ConvBlock::new(8, 3, 1, 2), ConvBlock::new(16, 3, 1, 2)],
            feature_dim: 256,
            lstm_hidden: 64,
            lstm_layers: 2,
            fc_hidden: 128,
            dropout_rate: 0.5,
        }
    }

    /// Tiny network used for gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            input_h: 8,
            input_w: 8,
            conv_blocks: vec![ConvBlock::new(2, 3, 1, 2)],
            feature_dim: 16,
            lstm_hidden: 8,
            lstm_layers: 2,
            fc_hidden: 8,
            dropout_rate: 0.5,
        }
    }

    /// Full-size head on a VGG16-shaped convolution stack for DAVIS 240C
    /// images: 4096 features read as 64 steps of 64, two LSTM layers of 256
    /// units and a 512-unit fully connected layer.
    pub fn paper_scale() -> Self {
        let mut blocks = Vec::new();
        for (ch, reps) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)] {
            for r in 0..reps {
                blocks.push(ConvBlock::new(ch, 3, 1, if r + 1 == reps { 2 } else { 1 }));
            }
        }
        ModelConfig {
            input_h: 180,
            input_w: 240,
            conv_blocks: blocks,
            feature_dim: 4096,
            lstm_hidden: 256,
            lstm_layers: 2,
            fc_hidden: 512,
            dropout_rate: 0.5,
        }
    }

    /// Side of the feature square: sequence length and LSTM input width.
    pub fn seq_len(&self) -> usize {
        (self.feature_dim as f64).sqrt().round() as usize
    }

    /// `(channels, h, w)` after each convolution block, starting with the
    /// single-channel input.
    pub fn conv_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes = vec![(1, self.input_h, self.input_w)];
        let (mut h, mut w) = (self.input_h, self.input_w);
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 || b.pool == 0 {
                return Err(Error::Config(format!("conv block {i} has a zero field: {b:?}")));
            }
            let p = b.padding();
            if h + 2 * p < b.kernel || w + 2 * p < b.kernel {
                return Err(Error::Config(format!(
                    "conv block {i}: kernel {} larger than {h}x{w} input",
                    b.kernel
                )));
            }
            h = (h + 2 * p - b.kernel) / b.stride + 1;
            w = (w + 2 * p - b.kernel) / b.stride + 1;
            if b.pool > 1 {
                if h < b.pool || w < b.pool {
                    return Err(Error::Config(format!(
                        "conv block {i}: pool {} larger than {h}x{w}",
                        b.pool
                    )));
                }
                h /= b.pool;
                w /= b.pool;
            }
            shapes.push((b.out_channels, h, w));
        }
        Ok(shapes)
    }

    /// Length of the flattened convolution output.
    pub fn flat_dim(&self) -> Result<usize> {
        let (c, h, w) = *self.conv_shapes()?.last().expect("input shape always present");
        Ok(c * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_h == 0 || self.input_w == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        let s = self.seq_len();
        if self.feature_dim == 0 || s * s != self.feature_dim {
            return Err(Error::Config(format!(
                "feature_dim {} is not a perfect square",
                self.feature_dim
            )));
        }
        if self.lstm_layers == 0 || self.lstm_hidden == 0 || self.fc_hidden == 0 {
            return Err(Error::Config(
                "lstm_layers, lstm_hidden and fc_hidden must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        self.conv_shapes()?;
        Ok(())
    }
}
