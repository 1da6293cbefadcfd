//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod graph;
mod layers;
mod params;
mod tensor;

pub use graph::{
    Activation, BatchNormIds, Backward, Graph, Mode, RunningStatUpdate, Var, BN_EPS, BN_MOMENTUM,
    KL_EPS,
};
pub use layers::{lstm_cell_step, register_batch_norm, Linear, LstmParams};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
