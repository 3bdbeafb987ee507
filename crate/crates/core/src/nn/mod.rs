//! A small deterministic MLP engine: dense layers, ReLU/tanh, softmax or
//! sigmoid heads, hand-written backpropagation and Adam. Everything is binary64.

mod adam;
mod checkpoint;
mod network;
pub(crate) mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{ModelCheckpoint, PhaseRecord, Provenance};
pub use network::{
    batch_matrix, forward, loss_and_gradients, predict, softmax_rows, target_matrix, Activation,
    Dense, Direction, ForwardPass, Gradients, Head, ModelArchitecture, Network, Predictions,
};
pub use train::{
    train_epochs, DivergenceReport, EpochEnd, TrainOptions, TrainOutcome, TrainingSource,
};
