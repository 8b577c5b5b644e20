//! Small BatchNorm convolutional classifier with hand-written reverse mode.
//!
//! All arithmetic is `f64` so finite-difference checks are meaningful.
//! Inference always normalizes with running statistics; only [`train`]
//! uses batch statistics and updates the running averages.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod objective;
pub mod train;

pub use checkpoint::{ModelCheckpoint, TrainingMeta};
pub use model::{
    running_update, spatial_means, ActivationTaps, ArchConfig, BnLayerStats, BnMode, BnStats,
    ForwardTrace, Gradients, Seeds, SmallNet, Want,
};
pub use objective::{input_gradient, ClassLogitSum, Constant, MaxLogSoftmax, Objective, ObjectiveValue};
pub use train::{accuracy, cross_entropy, train, TrainHyper};

use ndarray::{Array2, Array4};

use crate::datagen::ImageBatch;
use crate::error::Result;

pub fn build_model(arch: &ArchConfig, seed: u64) -> Result<SmallNet> {
    SmallNet::new(arch, seed)
}

pub fn forward_with_taps(
    checkpoint: &ModelCheckpoint,
    batch: &ImageBatch,
) -> Result<(Array2<f64>, ActivationTaps)> {
    checkpoint.net().forward_with_taps(batch.pixels())
}

/// Per-layer `∂y^c/∂A^l`, one `[n, h_l, d_l, d_l]` tensor per layer.
pub fn activation_gradients(
    checkpoint: &ModelCheckpoint,
    batch: &ImageBatch,
    class: usize,
) -> Result<Vec<Array4<f64>>> {
    Ok(checkpoint.net().activation_gradients(batch.pixels(), class)?.2)
}
