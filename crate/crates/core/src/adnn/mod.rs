//! Reference adaptive models with instrumented gates.

mod model;
mod spec;
mod train;

pub use model::{build_early_exit_model, build_skip_model, AdnnModel, GraphForward};
pub(crate) use spec::hash_json;
pub use spec::{block_layers, AdnnSpec, BlockShape, BlockSpec, BlockTrace, Mechanism};
pub use train::{evaluate_accuracy, train_adnn, AdnnTrainConfig, AdnnTrainReport, EpochStats};
pub(crate) use train::{minibatches, task_loss};
