//! Pretraining, adaptation to new subjects, the optimizer and checkpoints.

pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod pretrain;

pub use adapt::{adapt_loss, adapt_new_subject, train_scratch};
pub use checkpoint::{load_checkpoint, save_checkpoint, BestRecord, Checkpoint};
pub use config::{fingerprint, AdaptConfig, FinetuneStrategy, TrainConfig};
pub use optim::{optimizer_step, AdamW, Moments, OptimState};
pub use pretrain::{composite_loss, log_csv, pretrain, pretrain_step, EpochRow, TrainOutput};
