mod config;
mod model;
mod sweep;
mod train;

use thiserror::Error;

pub use config::{ContextInit, RunConfig, Task};
pub use model::{Checkpoint, Model, Momentum, TaskParams};
pub use sweep::{run_sweep, SweepAxis, SweepCell, SweepResult};
pub use train::{
    batch_gradients, evaluate_checkpoint, evaluate_model, init_model, prepare_tasks, resume, run, sybil_alignment,
    train_multitask, train_singletask, train_tasks, write_outputs, EpochStats, Evaluation, SybilAlignment, TaskData,
    TrainOutcome,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize, last_good: Box<Checkpoint> },
    #[error(transparent)]
    Corpus(#[from] crate::data::DataError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Metapath(#[from] crate::metapath::MetapathError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
