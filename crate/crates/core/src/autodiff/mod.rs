//! Minimal reverse-mode differentiation over rank-4 `f32` tensors, plus the
//! optimizers and learning-rate schedule used by the search and retraining
//! loops.

pub mod kernels;
mod optim;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use kernels::{out_extent, ConvGeom, PoolKind};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{BufferId, Group, Param, ParamId, ParamStore};
pub use schedule::{cosine_lr, LrSchedule};
pub use tape::{softmax, Gradients, Tape, Var, BN_EPS};
pub use tensor::{Shape, Tensor};
