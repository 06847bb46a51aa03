//! Pretraining and finetuning of single models and mixtures, with the
//! mixture's base models spread over worker threads.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{lr_at, Stage, TrainConfig};
pub use train::{
    finetune, pretrain, segment_examples, video_examples, write_diagnostics, DiagnosticRow, Example,
    TrainOutcome,
};
