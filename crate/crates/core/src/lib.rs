//! Differentiable architecture transformation.
//!
//! Every edge of a given network becomes a mixed edge that blends the zero
//! tensor, its input and its original operation under learned coefficients
//! θ. After a short architecture stage the network is discretized by argmax,
//! repaired if the output became unreachable, and trained further with θ
//! frozen.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discretize;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod mixed;
pub mod model;
pub mod optim;
pub mod tape;
pub mod templates;
pub mod tensor;
pub mod trainer;

use thiserror::Error;

pub use checkpoint::CheckpointError;
pub use config::ConfigError;
pub use data::DataError;
pub use discretize::RepairError;
pub use graph::GraphError;
pub use tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Repair(#[from] RepairError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("oracle: {0}")]
    Oracle(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
