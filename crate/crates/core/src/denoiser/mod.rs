//! Trainable patch denoiser: network, score-matching training, checkpoints.

pub mod checkpoint;
pub mod net;
pub mod train;

pub use checkpoint::Checkpoint;
pub use net::{Activation, NetArch, Pass, PatchDenoiserNet, Precond, SIGMA_DATA};
pub use train::{
    dsm_loss, dsm_loss_weighted, evaluate_loss, sample_batch, sample_training_patch, train, validation_samples, Adam,
    DsmLoss, DsmSample, LogRow, LossWeighting, TrainConfig, TrainingPatch, TRAIN_LOG_HEADER,
};
