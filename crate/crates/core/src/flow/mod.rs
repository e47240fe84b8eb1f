//! Conditional velocity field over 2D points and its flow-matching pretraining.

pub mod model;
pub mod pretrain;
pub mod task;
pub mod velocity;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::focus::FocusError;
use task::Task;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown task {0:?} (expected move-to-mode, reflect-axis or translate-offset)")]
    UnknownTask(String),
    #[error("word {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("token id {0} is not in the vocabulary")]
    UnknownTokenId(usize),
    #[error("code {code} is invalid for task {task}")]
    BadCode { task: Task, code: usize },
    #[error("instruction length {0} outside 1..=32")]
    BadLength(usize),
    #[error("cannot decode instruction {0:?}")]
    Undecodable(String),
    #[error("dataset line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Focus(#[from] FocusError),
    #[error("time {0} outside [0, 1]")]
    BadTime(f64),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("pretraining diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
}

impl FlowError {
    /// True when the error comes from a NaN or infinity anywhere in the model.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            Self::Autodiff(AutodiffError::NonFinite { .. })
                | Self::Focus(FocusError::Autodiff(AutodiffError::NonFinite { .. }))
        )
    }
}
