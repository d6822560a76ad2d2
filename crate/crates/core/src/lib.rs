//! Out-in-channel sparsity regularization and global greedy channel pruning.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`graph`]: `f64` tensors and reverse-mode autodiff.
//! * [`model`]: sequential networks and the derived out-in-channel pairs.
//! * [`regularizers`]: L2, separated Group Lasso, out-in-channel Group Lasso
//!   and L1 on scaling factors, each with analytic gradients.
//! * [`importance`]: channel energies and the global scoring pass.
//! * [`pruner`]: FLOPs accounting, greedy selection under a FLOPs budget and
//!   physical channel removal.
//! * [`trainer`]: Nesterov SGD and the train / fine-tune loops.
//! * [`data`]: synthetic datasets, IDX files and checkpoints.

pub mod data;
pub mod grads;
pub mod graph;
pub mod importance;
pub mod model;
pub mod pruner;
pub mod regularizers;
pub mod tensor;
pub mod trainer;

use thiserror::Error;

pub use data::{checkpoint::Checkpoint, Dataset, Split, SyntheticTask};
pub use grads::Gradients;
pub use graph::{Graph, NodeId};
pub use importance::{Criterion, OutInChannelGroup};
pub use model::{Architecture, ChannelPair, Layer, LayerSpec, Model, ParamSlot};
pub use pruner::{FlopsReport, PruningPlan};
pub use regularizers::RegularizerKind;
pub use tensor::Tensor;
pub use trainer::{EpochMetrics, RunConfig};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Regularizer(#[from] regularizers::RegularizerError),
    #[error(transparent)]
    Importance(#[from] importance::ImportanceError),
    #[error(transparent)]
    Prune(#[from] pruner::PruneError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Data(#[from] data::DataError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
