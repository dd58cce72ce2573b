use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gate order used everywhere: input, forget, output, candidate.
pub const GATES: [&str; 4] = ["i", "f", "o", "g"];

/// Every learnable array of the network in canonical order:
///
/// ```text
/// conv{k}.weight [o,c,k,k], conv{k}.bias [o]          per conv block
/// feature.weight [F, flat], feature.bias [F,1]
/// lstm{l}.w_x{gate} [H,in], lstm{l}.w_h{gate} [H,H], lstm{l}.b_{gate} [H,1]
///                                                     per layer, gates i,f,o,g
/// head.fc1.weight [fc,H], head.fc1.bias [fc,1]
/// head.fc2.weight [7,fc], head.fc2.bias [7,1]
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

/// Positions of each parameter group inside [`ModelParams::tensors`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub conv_blocks: usize,
    pub lstm_layers: usize,
}

impl Layout {
    pub fn of(config: &ModelConfig) -> Self {
        Layout {
            conv_blocks: config.conv_blocks.len(),
            lstm_layers: config.lstm_layers,
        }
    }
    pub fn conv(&self, block: usize) -> (usize, usize) {
        (2 * block, 2 * block + 1)
    }
    pub fn feature(&self) -> (usize, usize) {
        let b = 2 * self.conv_blocks;
        (b, b + 1)
    }
    /// Index of `lstm{layer}.w_x{gate}`; `+1` is `w_h`, `+2` the bias.
    pub fn lstm(&self, layer: usize, gate: usize) -> usize {
        2 * self.conv_blocks + 2 + 12 * layer + 3 * gate
    }
    pub fn head(&self) -> [usize; 4] {
        let b = 2 * self.conv_blocks + 2 + 12 * self.lstm_layers;
        [b, b + 1, b + 2, b + 3]
    }
    pub fn count(&self) -> usize {
        2 * self.conv_blocks + 2 + 12 * self.lstm_layers + 4
    }
}

/// `(name, shape)` for every parameter, in canonical order.
pub fn manifest(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    config.validate()?;
    let mut out = Vec::new();
    let mut in_ch = 1;
    for (k, b) in config.conv_blocks.iter().enumerate() {
        out.push((
            format!("conv{k}.weight"),
            vec![b.out_channels, in_ch, b.kernel, b.kernel],
        ));
        out.push((format!("conv{k}.bias"), vec![b.out_channels]));
        in_ch = b.out_channels;
    }
    let f = config.feature_dim;
    out.push(("feature.weight".into(), vec![f, config.flat_dim()?]));
    out.push(("feature.bias".into(), vec![f, 1]));
    let h = config.lstm_hidden;
    for l in 0..config.lstm_layers {
        let input = if l == 0 { config.seq_len() } else { h };
        for g in GATES {
            out.push((format!("lstm{l}.w_x{g}"), vec![h, input]));
            out.push((format!("lstm{l}.w_h{g}"), vec![h, h]));
            out.push((format!("lstm{l}.b_{g}"), vec![h, 1]));
        }
    }
    out.push(("head.fc1.weight".into(), vec![config.fc_hidden, h]));
    out.push(("head.fc1.bias".into(), vec![config.fc_hidden, 1]));
    out.push(("head.fc2.weight".into(), vec![7, config.fc_hidden]));
    out.push(("head.fc2.bias".into(), vec![7, 1]));
    debug_assert_eq!(out.len(), Layout::of(config).count());
    Ok(out)
}

/// Glorot bound `sqrt(6 / (fan_in + fan_out))` for a weight shape.
fn glorot_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [o, c, kh, kw] => (c * kh * kw, o * kh * kw),
        [rows, cols] => (*cols, *rows),
        _ => unreachable!("weights are 2-D or 4-D"),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ModelParams {
    /// Seeded uniform Glorot weights, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = manifest(config)?
            .into_iter()
            .map(|(name, shape)| {
                if is_bias(&name) {
                    Tensor::zeros(&shape)
                } else {
                    let a = glorot_bound(&shape);
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
                    Tensor::new(shape, data).expect("manifest shapes are consistent")
                }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    /// Wraps arrays, checking them against the config's manifest.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let man = manifest(&config)?;
        if man.len() != tensors.len() {
            return Err(Error::shape(
                "model params",
                format!("expected {} arrays, got {}", man.len(), tensors.len()),
            ));
        }
        for ((name, shape), t) in man.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "model params",
                    format!("{name}: expected {shape:?}, got {:?}", t.shape()),
                ));
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn layout(&self) -> Layout {
        Layout::of(&self.config)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Borrowed view of one LSTM layer.
    pub fn lstm_layer(&self, layer: usize) -> LstmLayer<'_> {
        let lay = self.layout();
        let pick = |gate: usize, off: usize| &self.tensors[lay.lstm(layer, gate) + off];
        LstmLayer {
            w_x: [pick(0, 0), pick(1, 0), pick(2, 0), pick(3, 0)],
            w_h: [pick(0, 1), pick(1, 1), pick(2, 1), pick(3, 1)],
            b: [pick(0, 2), pick(1, 2), pick(2, 2), pick(3, 2)],
        }
    }

    /// Puts every parameter on the tape with its canonical index as id.
    pub fn register<'p>(&'p self, tape: &mut Tape<'p>) -> Vec<Var> {
        self.tensors.iter().enumerate().map(|(i, t)| tape.param(i, t)).collect()
    }
}

pub(crate) fn is_bias(name: &str) -> bool {
    name.ends_with(".bias") || name.contains(".b_")
}

/// One LSTM layer's weights, gates ordered i, f, o, g. Input matrices are
/// `[H, in]`, recurrent matrices `[H, H]`, biases `[H, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmLayer<'p> {
    pub w_x: [&'p Tensor; 4],
    pub w_h: [&'p Tensor; 4],
    pub b: [&'p Tensor; 4],
}

/// Owned LSTM layer weights, convenient for standalone use.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_x: [Tensor; 4],
    pub w_h: [Tensor; 4],
    pub b: [Tensor; 4],
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_x: std::array::from_fn(|_| Tensor::zeros(&[hidden, input])),
            w_h: std::array::from_fn(|_| Tensor::zeros(&[hidden, hidden])),
            b: std::array::from_fn(|_| Tensor::zeros(&[hidden, 1])),
        }
    }

    pub fn view(&self) -> LstmLayer<'_> {
        LstmLayer {
            w_x: std::array::from_fn(|g| &self.w_x[g]),
            w_h: std::array::from_fn(|g| &self.w_h[g]),
            b: std::array::from_fn(|g| &self.b[g]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w_x[0].shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w_x[0].shape()[0]
    }
}
