//! ConvMixer with an optional trainable token-mixing matrix `U` placed right
//! after the patch-embedding stem.

mod adaptive;
mod checkpoint;
mod config;
mod experiment;
mod gradcheck;
mod model;
mod train;

pub use adaptive::{
    apply_adaptive_matrix, extract_permutation, gather_matrix, loss_total, penalty_lu, PermutationExtraction,
};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{EncryptionMode, ModelConfig, RunConfig};
pub use experiment::{accuracy_trend, permutation_recovery, RecoveryReport, RecoverySetup, TrendReport, TrendRun};
pub use gradcheck::model_gradient_check;
pub use model::{Forward, MixerLayer, Model, Norm, ParamGroup, TrainScope};
pub use train::{
    evaluate, fit, metrics_csv_header, train_step, Adam, AdamConfig, EpochMetrics, StepOutcome, TrainConfig,
};
