//! Desk-scale laboratory for low-rank adapter architectures: LoRA, MoELoRA and
//! TeamLoRA with closed-form gradients, a frozen host network, synthetic
//! multi-task data, training, and the cost/load/redundancy/ablation analyses.

pub mod adapters;
pub mod analysis;
pub mod diffkit;
pub mod error;
pub mod host;
pub mod linalg;
pub mod rng;
pub mod tasks;
pub mod train;

pub use adapters::{
    matmul_count, param_count, Adapter, AdapterConfig, AdapterKind, MatmulCount, ParamCount, Participation,
    RouterKind, RouterOutput,
};
pub use error::{Error, Result};
pub use host::{Activation, AdapterSpec, ForwardTrace, FrozenHost};
pub use linalg::{matmul, softmax_rows, split_columns, Matrix, OpCounter};
pub use tasks::{Dataset, DatasetSpec, TaskMode};
pub use train::{LossKind, Metrics, OptimizerKind, TrainConfig};
