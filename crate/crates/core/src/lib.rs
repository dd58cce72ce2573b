//! Event-camera 6DOF pose relocalization.
//!
//! Event streams are grouped into pose-labeled windows, rendered as ternary
//! event images and regressed to a position + quaternion pose by a small CNN
//! followed by a stacked spatial LSTM. The crate also carries the evaluation
//! protocol (random/novel splits, median errors, event-fraction robustness)
//! and a synthetic wireframe dataset generator for desk-scale experiments.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod event_image;
pub mod event_io;
pub mod model;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
pub use eval::{ErrorSummary, EvalReport, PosePredictor, RobustnessTable};
pub use event_image::EventImage;
pub use event_io::{Event, EventWindow, PoseLabel, Windowing};
pub use model::{ModelConfig, ModelParams, PosePrediction};
pub use pipeline::{Checkpoint, TrainConfig};
