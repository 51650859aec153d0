//! Two-stage training, feature precomputation, evaluation and checkpoints.

mod checkpoint;
mod config;
mod dsd;
mod eval;
mod satn;

pub use checkpoint::{Checkpoint, RngState, Stage};
pub use config::TrainConfig;
pub use dsd::{
    dsd_frame_loss, dsd_predict, frame_samples, predicted_joints, theta_terms, train_dsd, DsdPrediction, FrameLoss,
    FrameSample,
};
pub use eval::{evaluate, EvalReport, SequenceReport};
pub use satn::{
    full_windows, precompute_features, satn_predict_sequence, sort_accuracy_on, train_satn, FeatureStore,
    SeqFeatures,
};
