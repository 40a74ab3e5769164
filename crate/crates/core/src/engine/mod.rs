//! Minimal differentiable runtime: layers, DAG networks, cross-entropy,
//! optimizers and the training loops.

pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod train;

pub use layers::{Activation, Layer, LayerSpec, Mode, Padding, ParamRole, PoolKind, Shape};
pub use network::{infer_shapes, BuildError, Gradients, Network, NodeShapes, NodeSpec, Tape};
pub use optim::{LearningError, LrSchedule, Optimizer, OptimizerConfig, OptimizerKind};
pub use train::{
    evaluate, train, AdvTraining, Budget, Evaluation, StepBudget, StopReason, TrainConfig, TrainReport,
};
