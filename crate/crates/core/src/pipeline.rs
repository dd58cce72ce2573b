//! Training loop, train/test splitting of a recording and the checkpoint
//! container.
//!
//! A checkpoint file is
//!
//! ```text
//! b"EVRCKPT\0"  u32 LE format version  u64 LE header length  JSON header
//! f64 LE parameters (manifest order)  f64 LE velocities (same order)
//! f64 LE per-epoch training losses
//! ```

use std::fs;
use std::io::BufReader;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step_factored, OptState, ParamGrad, Tape, Tensor};
use crate::error::{Error, Result};
use crate::event_image::{window_image, EventImage};
use crate::event_io::{parse_events, parse_poses, split_novel, split_random, window_events, EventWindow, Windowing};
use crate::model::{forward_tape, manifest, pose_loss_tape, ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EVRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const EVENTS_FILE: &str = "events.txt";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    #[default]
    Random,
    Novel,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitKind::Random),
            "novel" => Ok(SplitKind::Novel),
            other => Err(Error::Config(format!(
                "unknown split {other:?}, expected random or novel"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives initialization, epoch shuffles, dropout masks and the random
    /// split.
    pub seed: u64,
    pub split: SplitKind,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            lr: 1e-5,
            momentum: 0.9,
            weight_decay: 1e-6,
            epochs: 200,
            batch_size: 1,
            seed: 0,
            split: SplitKind::Random,
            train_fraction: 0.7,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Range {
                what: "train_fraction",
                value: self.train_fraction,
                range: "(0, 1)",
            });
        }
        for (what, v) in [("lr", self.lr), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Range {
                    what,
                    value: v,
                    range: "[0, inf)",
                });
            }
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Range {
                what: "momentum",
                value: self.momentum,
                range: "[0, 1)",
            });
        }
        Ok(())
    }

    /// `(train, test)` windows according to `split` and `train_fraction`.
    pub fn split_windows(&self, windows: &[EventWindow]) -> Result<(Vec<EventWindow>, Vec<EventWindow>)> {
        match self.split {
            SplitKind::Random => split_random(windows, self.train_fraction, self.seed),
            SplitKind::Novel => split_novel(windows, self.train_fraction),
        }
    }
}

/// Reads `events.txt` and `groundtruth.txt` from `dir` and windows them.
/// Events must fit a `width x height` sensor.
pub fn load_recording(dir: &Path, width: usize, height: usize) -> Result<Windowing> {
    let open = |name: &str| -> Result<BufReader<fs::File>> {
        let path = dir.join(name);
        fs::File::open(&path)
            .map(BufReader::new)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
    };
    let events = parse_events(open(EVENTS_FILE)?, width, height)?;
    let poses = parse_poses(open(GROUNDTRUTH_FILE)?)?;
    window_events(&events, &poses)
}

/// Trained model plus everything needed to inspect or continue it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: OptState,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean training loss of every completed epoch.
    pub loss_history: Vec<f64>,
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }
}

/// Full-window event images for every window, in input order.
pub fn window_images(windows: &[EventWindow], config: &ModelConfig) -> Result<Vec<EventImage>> {
    windows
        .iter()
        .map(|w| window_image(w, 1.0, config.input_h, config.input_w))
        .collect()
}

/// Per-image SGD over `windows` for `config.epochs` epochs. `on_epoch` is
/// called with the 1-based epoch and its mean loss.
pub fn train_with<F: FnMut(usize, f64)>(
    config: &TrainConfig,
    windows: &[EventWindow],
    mut on_epoch: F,
) -> Result<Checkpoint> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::EmptyInput("no training windows"));
    }
    let images = window_images(windows, &config.model)?;
    let mut params = ModelParams::init(&config.model, config.seed)?;
    let mut opt = OptState::new(&params.tensors, config.lr, config.momentum, config.weight_decay);
    // shuffles and dropout masks come from a stream separate from the
    // initialization so changing one does not perturb the other
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Option<Vec<ParamGrad>> = None;
            for &i in batch {
                let (loss, grads) = {
                    let mut tape = Tape::new();
                    let vars = params.register(&mut tape);
                    let out = forward_tape(&mut tape, &vars, &config.model, &images[i], true, rng.random())?;
                    let loss = pose_loss_tape(&mut tape, out, &windows[i].label)?;
                    let value = tape.value(loss).item();
                    if !value.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite loss {value} at epoch {epoch}, window {}",
                            windows[i].sequence_index
                        )));
                    }
                    (value, tape.backward_factored(loss, params.tensors.len())?)
                };
                total += loss;
                acc = Some(match acc {
                    None => grads,
                    Some(sum) => sum
                        .into_iter()
                        .zip(grads)
                        .map(|(s, g)| {
                            let mut s = s.into_dense();
                            for (a, b) in s.data_mut().iter_mut().zip(g.into_dense().data()) {
                                *a += b;
                            }
                            ParamGrad::Dense(s)
                        })
                        .collect(),
                });
            }
            let mut grads = acc.expect("non-empty batch");
            if batch.len() > 1 {
                let scale = 1.0 / batch.len() as f64;
                for g in &mut grads {
                    let mut t = std::mem::replace(g, ParamGrad::Dense(Tensor::scalar(0.0))).into_dense();
                    for v in t.data_mut() {
                        *v *= scale;
                    }
                    *g = ParamGrad::Dense(t);
                }
            }
            sgd_step_factored(&mut params.tensors, &grads, &mut opt).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{msg} at epoch {epoch}")),
                other => other,
            })?;
        }
        let mean = total / windows.len() as f64;
        log::info!("epoch {epoch}/{} mean loss {mean:.6}", config.epochs);
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(Checkpoint {
        params,
        optimizer: opt,
        epoch: config.epochs,
        loss_history: history,
        train_config: Some(config.clone()),
    })
}

pub fn train(config: &TrainConfig, windows: &[EventWindow]) -> Result<Checkpoint> {
    train_with(config, windows, |_, _| {})
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    model: ModelConfig,
    manifest: Vec<ManifestEntry>,
    epoch: usize,
    loss_entries: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    train: Option<TrainConfig>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let manifest: Vec<ManifestEntry> = manifest(ckpt.config())?
        .into_iter()
        .map(|(name, shape)| ManifestEntry { name, shape })
        .collect();
    let header = Header {
        version: CHECKPOINT_VERSION,
        model: ckpt.config().clone(),
        manifest,
        epoch: ckpt.epoch,
        loss_entries: ckpt.loss_history.len(),
        lr: ckpt.optimizer.lr,
        momentum: ckpt.optimizer.momentum,
        weight_decay: ckpt.optimizer.weight_decay,
        train: ckpt.train_config.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let scalars = ckpt.params.num_scalars();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * (2 * scalars + ckpt.loss_history.len()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let arrays = ckpt.params.tensors.iter().chain(&ckpt.optimizer.velocity);
    for v in arrays.flat_map(|t| t.data()).chain(&ckpt.loss_history) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let take = |at: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(at..at.checked_add(n).ok_or_else(|| corrupt("length overflow"))?)
            .ok_or_else(|| corrupt(format!("truncated: need {} bytes, have {}", at + n, bytes.len())))
    };
    if take(0, 8)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(take(12, 8)?.try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| corrupt("header length overflow"))?;
    let header: Header = serde_json::from_slice(take(20, hlen)?).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.version != version {
        return Err(corrupt("header version disagrees with preamble"));
    }
    header
        .model
        .validate()
        .map_err(|e| corrupt(format!("bad model config: {e}")))?;
    let expected: Vec<ManifestEntry> = manifest(&header.model)?
        .into_iter()
        .map(|(name, shape)| ManifestEntry { name, shape })
        .collect();
    if expected != header.manifest {
        return Err(corrupt("parameter manifest does not match the model config"));
    }

    let scalars: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let count = 2 * scalars + header.loss_entries;
    let body = &bytes[20 + hlen..];
    if body.len() != 8 * count {
        return Err(corrupt(format!(
            "expected {} data bytes, found {}",
            8 * count,
            body.len()
        )));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut read_arrays = || -> Vec<Tensor> {
        expected
            .iter()
            .map(|e| {
                let n = e.shape.iter().product();
                Tensor::new(e.shape.clone(), values.by_ref().take(n).collect()).expect("length checked")
            })
            .collect()
    };
    let tensors = read_arrays();
    let velocity = read_arrays();
    let loss_history: Vec<f64> = values.collect();
    Ok(Checkpoint {
        params: ModelParams::from_tensors(header.model, tensors)?,
        optimizer: OptState {
            velocity,
            lr: header.lr,
            momentum: header.momentum,
            weight_decay: header.weight_decay,
        },
        epoch: header.epoch,
        loss_history,
        train_config: header.train,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_io::{Event, PoseLabel};
    use crate::model::predict;

    fn toy_windows(n: usize) -> Vec<EventWindow> {
        (0..n)
            .map(|i| EventWindow {
                events: (0..6)
                    .map(|k| Event::new(i as f64 + k as f64 * 0.01, ((i + k) % 8) as u32, (k * 3 % 8) as u32, 1))
                    .collect(),
                label: PoseLabel {
                    t: i as f64 + 1.0,
                    p: [0.1 * i as f64, -0.2, 0.3],
                    q: [0.0, 0.6, 0.0, 0.8],
                },
                sequence_index: i,
            })
            .collect()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig::toy(),
            lr: 1e-3,
            epochs: 3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = TrainConfig {
            lr: 0.0,
            ..toy_config()
        };
        let ckpt = train(&cfg, &toy_windows(3)).unwrap();
        let init = ModelParams::init(&cfg.model, cfg.seed).unwrap();
        assert_eq!(ckpt.params, init);
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(&toy_config(), &toy_windows(4)).unwrap();
        let b = train(&toy_config(), &toy_windows(4)).unwrap();
        assert_eq!(a.loss_history.len(), 3);
        assert!(a.loss_history.iter().all(|l| l.is_finite()));
        assert_eq!(checkpoint_bytes(&a).unwrap(), checkpoint_bytes(&b).unwrap());
    }

    #[test]
    fn batches_average_gradients() {
        let cfg = TrainConfig {
            batch_size: 2,
            ..toy_config()
        };
        let ckpt = train(&cfg, &toy_windows(5)).unwrap();
        assert_eq!(ckpt.loss_history.len(), 3);
    }

    #[test]
    fn single_window_overfits() {
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 500,
            model: ModelConfig {
                dropout_rate: 0.0,
                ..ModelConfig::toy()
            },
            ..toy_config()
        };
        let ckpt = train(&cfg, &toy_windows(1)).unwrap();
        let (first, last) = (ckpt.loss_history[0], *ckpt.loss_history.last().unwrap());
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn exploding_training_names_the_epoch() {
        let cfg = TrainConfig {
            lr: 1e150,
            ..toy_config()
        };
        match train(&cfg, &toy_windows(3)) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("epoch"), "{msg}"),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(matches!(train(&toy_config(), &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let ckpt = train(&toy_config(), &toy_windows(3)).unwrap();
        let bytes = checkpoint_bytes(&ckpt).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        let img = window_image(&toy_windows(1)[0], 1.0, 8, 8).unwrap();
        assert_eq!(
            predict(&img, &back.params).unwrap(),
            predict(&img, &ckpt.params).unwrap()
        );
    }

    #[test]
    fn checkpoint_describes_its_own_architecture() {
        let model = ModelConfig {
            input_h: 32,
            input_w: 32,
            feature_dim: 16,
            ..ModelConfig::toy()
        };
        let ckpt = Checkpoint {
            optimizer: OptState::new(&ModelParams::init(&model, 1).unwrap().tensors, 0.1, 0.9, 0.0),
            params: ModelParams::init(&model, 1).unwrap(),
            epoch: 0,
            loss_history: vec![],
            train_config: None,
        };
        let back = checkpoint_from_bytes(&checkpoint_bytes(&ckpt).unwrap()).unwrap();
        let img = crate::event_image::EventImage::blank(32, 32);
        predict(&img, &back.params).unwrap();
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let ckpt = train(&toy_config(), &toy_windows(2)).unwrap();
        let bytes = checkpoint_bytes(&ckpt).unwrap();
        for cut in [0, 7, 19, 40, bytes.len() - 1] {
            assert!(
                matches!(checkpoint_from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))),
                "cut at {cut}"
            );
        }
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(
            checkpoint_from_bytes(&wrong_version),
            Err(Error::CorruptCheckpoint(_))
        ));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(matches!(
            checkpoint_from_bytes(&extra),
            Err(Error::CorruptCheckpoint(_))
        ));
        // a manifest shape edited in the header
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let bad = text.replacen("\"shape\":[2,1,3,3]", "\"shape\":[2,1,3,4]", 1);
        assert_ne!(bad, text);
        let mut edited = bad.into_bytes();
        edited.truncate(bytes.len());
        assert!(matches!(
            checkpoint_from_bytes(&edited),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn config_json_defaults_and_validation() {
        let cfg = TrainConfig::from_json(r#"{"epochs": 5, "split": "novel"}"#).unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.split, SplitKind::Novel);
        assert_eq!(cfg.lr, 1e-5);
        assert_eq!(cfg.model, ModelConfig::desk());
        assert!(TrainConfig::from_json(r#"{"epochs": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"train_fraction": 1.0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"learning_rate": 1.0}"#).is_err());
    }
}
