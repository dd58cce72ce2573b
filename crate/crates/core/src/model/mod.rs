//! Pose regression network: small CNN, feature vector reshaped into a
//! sequence, stacked spatial LSTM, two fully connected layers producing
//! `(p, q)`.

mod config;
mod lstm;
mod network;
mod params;

pub use config::{ConvBlock, ModelConfig};
pub use lstm::{lstm_cell, lstm_step, stacked_lstm, stacked_lstm_forward, LayerVars, LstmState};
pub use network::{
    cnn_forward, cnn_forward_tape, forward_raw, forward_tape, pose_head, pose_head_tape, pose_loss, pose_loss_tape,
    predict, reshape_features, reshape_features_tape, PosePrediction,
};
pub use params::{manifest, Layout, LstmLayer, LstmParams, ModelParams, GATES};
