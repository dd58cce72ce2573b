use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::lstm::{stacked_lstm, LayerVars};
use super::params::{Layout, ModelParams};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::event_image::EventImage;
use crate::event_io::PoseLabel;

/// Network output for one image. `q_hat` is `q_hat_raw` scaled to unit
/// length; all quaternions are (qx, qy, qz, qw).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePrediction {
    pub p_hat: [f64; 3],
    pub q_hat_raw: [f64; 4],
    pub q_hat: [f64; 4],
}

impl PosePrediction {
    /// Splits a raw 7-vector `(p, q)` and normalizes the quaternion.
    pub fn from_raw(out: &[f64]) -> Result<Self> {
        if out.len() != 7 {
            return Err(Error::shape(
                "pose output",
                format!("expected 7 values, got {}", out.len()),
            ));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite network output {out:?}")));
        }
        let p_hat = [out[0], out[1], out[2]];
        let q_hat_raw = [out[3], out[4], out[5], out[6]];
        let n = q_hat_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::DegenerateOutput);
        }
        let q_hat = q_hat_raw.map(|v| v / n);
        Ok(PosePrediction {
            p_hat,
            q_hat_raw,
            q_hat,
        })
    }

    /// A prediction that reproduces a label exactly.
    pub fn from_label(label: &PoseLabel) -> Self {
        PosePrediction {
            p_hat: label.p,
            q_hat_raw: label.q,
            q_hat: label.q,
        }
    }
}

fn image_tensor(image: &EventImage, cfg: &ModelConfig) -> Result<Tensor> {
    if image.h != cfg.input_h || image.w != cfg.input_w {
        return Err(Error::shape(
            "cnn_forward",
            format!(
                "image is {}x{}, model expects {}x{}",
                image.h, image.w, cfg.input_h, cfg.input_w
            ),
        ));
    }
    Tensor::new(vec![1, image.h, image.w], image.pixels.clone())
}

/// Convolution blocks, flatten, fully connected layer to `feature_dim`,
/// then dropout (active only when `training`). Returns `[F, 1]`.
pub fn cnn_forward_tape(
    tape: &mut Tape<'_>,
    vars: &[Var],
    cfg: &ModelConfig,
    image: Var,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let lay = Layout::of(cfg);
    let mut x = image;
    for (k, block) in cfg.conv_blocks.iter().enumerate() {
        let (w, b) = lay.conv(k);
        x = tape.conv2d(x, vars[w], vars[b], block.stride, block.padding())?;
        x = tape.relu(x)?;
        if block.pool > 1 {
            x = tape.maxpool2d(x, block.pool)?;
        }
    }
    let flat = tape.value(x).len();
    x = tape.reshape(x, &[flat, 1])?;
    let (w, b) = lay.feature();
    let z = tape.matmul(vars[w], x)?;
    let z = tape.add(z, vars[b])?;
    tape.dropout(z, cfg.dropout_rate, training, seed)
}

/// Row-major split of an `[S*S, 1]` feature column into `S` steps of `[S, 1]`.
pub fn reshape_features_tape(tape: &mut Tape<'_>, features: Var) -> Result<Vec<Var>> {
    let n = tape.value(features).len();
    let s = square_side(n)?;
    let col = tape.reshape(features, &[n, 1])?;
    (0..s).map(|j| tape.slice(col, j * s, (j + 1) * s)).collect()
}

fn square_side(n: usize) -> Result<usize> {
    let s = (n as f64).sqrt().round() as usize;
    if n == 0 || s * s != n {
        return Err(Error::shape(
            "reshape_features",
            format!("length {n} is not a perfect square"),
        ));
    }
    Ok(s)
}

/// `relu(FC1 h) -> FC2`, output `[7, 1]` ordered (p, qx, qy, qz, qw).
pub fn pose_head_tape(tape: &mut Tape<'_>, vars: &[Var], cfg: &ModelConfig, h: Var) -> Result<Var> {
    let [w1, b1, w2, b2] = Layout::of(cfg).head();
    let z = tape.matmul(vars[w1], h)?;
    let z = tape.add(z, vars[b1])?;
    let z = tape.relu(z)?;
    let out = tape.matmul(vars[w2], z)?;
    tape.add(out, vars[b2])
}

/// Position error norm plus raw-quaternion error norm.
pub fn pose_loss_tape(tape: &mut Tape<'_>, pred: Var, label: &PoseLabel) -> Result<Var> {
    if tape.value(pred).len() != 7 {
        return Err(Error::shape(
            "pose_loss",
            format!("prediction shape {:?}", tape.value(pred).shape()),
        ));
    }
    if label.p.iter().chain(&label.q).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite label".into()));
    }
    let pred = tape.reshape(pred, &[7, 1])?;
    let p_hat = tape.slice(pred, 0, 3)?;
    let q_hat = tape.slice(pred, 3, 7)?;
    let p = tape.constant(Tensor::column(&label.p));
    let q = tape.constant(Tensor::column(&label.q));
    let dp = tape.sub(p_hat, p)?;
    let dq = tape.sub(q_hat, q)?;
    let lp = tape.l2norm(dp)?;
    let lq = tape.l2norm(dq)?;
    tape.add(lp, lq)
}

/// Full network on the tape: image -> `[7, 1]` raw pose.
pub fn forward_tape(
    tape: &mut Tape<'_>,
    vars: &[Var],
    cfg: &ModelConfig,
    image: &EventImage,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let img = tape.constant(image_tensor(image, cfg)?);
    let features = cnn_forward_tape(tape, vars, cfg, img, training, seed)?;
    let seq = reshape_features_tape(tape, features)?;
    let lay = Layout::of(cfg);
    let layers: Vec<LayerVars> = (0..cfg.lstm_layers)
        .map(|l| LayerVars::from_params(vars, lay.lstm(l, 0)))
        .collect();
    let h = stacked_lstm(tape, &seq, &layers, cfg.lstm_hidden)?;
    pose_head_tape(tape, vars, cfg, h)
}

/// Feature vector of length `F` for one image.
pub fn cnn_forward(image: &EventImage, params: &ModelParams, training: bool, seed: u64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let img = tape.constant(image_tensor(image, &params.config)?);
    let f = cnn_forward_tape(&mut tape, &vars, &params.config, img, training, seed)?;
    Ok(tape.value(f).data().to_vec())
}

/// Step `j` is `v[j*S .. (j+1)*S]`.
pub fn reshape_features(v: &[f64]) -> Result<Vec<Vec<f64>>> {
    let s = square_side(v.len())?;
    Ok(v.chunks(s).map(<[f64]>::to_vec).collect())
}

pub fn pose_head(h: &[f64], params: &ModelParams) -> Result<[f64; 7]> {
    if h.len() != params.config.lstm_hidden {
        return Err(Error::shape(
            "pose_head",
            format!("hidden length {} vs lstm_hidden {}", h.len(), params.config.lstm_hidden),
        ));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let hv = tape.constant(Tensor::column(h));
    let out = pose_head_tape(&mut tape, &vars, &params.config, hv)?;
    let mut res = [0.0; 7];
    res.copy_from_slice(tape.value(out).data());
    Ok(res)
}

pub fn pose_loss(pred: &[f64], label: &PoseLabel) -> Result<f64> {
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite prediction {pred:?}")));
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![pred.len()], pred.to_vec())?);
    let l = pose_loss_tape(&mut tape, p, label)?;
    Ok(tape.value(l).item())
}

/// Raw 7-vector in inference mode.
pub fn forward_raw(image: &EventImage, params: &ModelParams) -> Result<[f64; 7]> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = forward_tape(&mut tape, &vars, &params.config, image, false, 0)?;
    let mut res = [0.0; 7];
    res.copy_from_slice(tape.value(out).data());
    Ok(res)
}

/// Inference: CNN (no dropout), stacked LSTM, head, quaternion normalized.
pub fn predict(image: &EventImage, params: &ModelParams) -> Result<PosePrediction> {
    PosePrediction::from_raw(&forward_raw(image, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label() -> PoseLabel {
        PoseLabel {
            t: 0.0,
            p: [0.1, -0.2, 0.3],
            q: [0.0, 0.0, 0.0, 1.0],
        }
    }

    #[test]
    fn features_of_blank_image() {
        let cfg = ModelConfig::toy();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let img = EventImage::blank(8, 8);
        let f = cnn_forward(&img, &params, false, 0).unwrap();
        assert_eq!(f.len(), 16);
        assert!(f.iter().all(|v| v.is_finite()));
        assert_eq!(f, cnn_forward(&img, &params, false, 0).unwrap());
    }

    #[test]
    fn sixteen_features_on_32x32() {
        let mut cfg = ModelConfig::toy();
        cfg.input_h = 32;
        cfg.input_w = 32;
        let params = ModelParams::init(&cfg, 3).unwrap();
        let f = cnn_forward(&EventImage::blank(32, 32), &params, true, 5).unwrap();
        assert_eq!(f.len(), 16);
        let steps = reshape_features(&f).unwrap();
        assert_eq!(steps.len(), 4);
        assert!(steps.iter().all(|s| s.len() == 4));
    }

    #[test]
    fn image_size_mismatch() {
        let params = ModelParams::init(&ModelConfig::toy(), 0).unwrap();
        assert!(matches!(
            predict(&EventImage::blank(9, 8), &params),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn reshape_rows() {
        let v: Vec<f64> = (1..=16).map(f64::from).collect();
        let steps = reshape_features(&v).unwrap();
        assert_eq!(steps[0], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(steps[3], vec![13.0, 14.0, 15.0, 16.0]);
        assert_eq!(steps.concat(), v);
        assert!(reshape_features(&v[..15]).is_err());
    }

    #[test]
    fn head_bias_passthrough() {
        let cfg = ModelConfig::toy();
        let mut params = ModelParams::init(&cfg, 0).unwrap();
        let [w1, _, w2, b2] = params.layout().head();
        params.tensors[w1] = Tensor::zeros(params.tensors[w1].shape());
        params.tensors[w2] = Tensor::zeros(params.tensors[w2].shape());
        let b = [1.0, 2.0, 3.0, 0.1, 0.2, 0.3, 0.9];
        params.tensors[b2] = Tensor::column(&b);
        assert_eq!(pose_head(&[0.3; 8], &params).unwrap(), b);
        assert!(pose_head(&[0.3; 7], &params).is_err());
    }

    #[test]
    fn loss_cases() {
        let l = label();
        let exact = [0.1, -0.2, 0.3, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(pose_loss(&exact, &l).unwrap(), 0.0);
        let off = [3.1, 3.8, 0.3, 0.0, 0.0, 0.0, 1.0];
        assert!((pose_loss(&off, &l).unwrap() - 5.0).abs() < 1e-12);
        let qoff = [0.1, -0.2, 0.3, 0.1, 0.0, 0.0, 1.0];
        assert!((pose_loss(&qoff, &l).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(pose_loss(&[f64::NAN; 7], &l), Err(Error::Numeric(_))));
    }

    #[test]
    fn prediction_is_unit_and_deterministic() {
        let params = ModelParams::init(&ModelConfig::toy(), 11).unwrap();
        let mut img = EventImage::blank(8, 8);
        img.pixels[10] = 1.0;
        img.pixels[20] = 0.0;
        let a = predict(&img, &params).unwrap();
        let b = predict(&img, &params).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.q_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_quaternion_output_is_reported() {
        let err = PosePrediction::from_raw(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateOutput));
    }

    #[test]
    fn normalization_ignores_positive_scale() {
        let a = PosePrediction::from_raw(&[0.0, 0.0, 0.0, 0.1, 0.2, -0.3, 0.9]).unwrap();
        let b = PosePrediction::from_raw(&[0.0, 0.0, 0.0, 0.7, 1.4, -2.1, 6.3]).unwrap();
        for k in 0..4 {
            assert!((a.q_hat[k] - b.q_hat[k]).abs() < 1e-15);
        }
    }
}
