//! Minimal differentiable compute layer: temporal convolution, pointwise
//! maps, masking, losses, parameter storage, Adam and the learning-rate
//! schedule.

pub mod container;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
mod real;
mod tensor;

pub use container::Container;
pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use graph::{softmax_columns, Graph, Reduction, Var};
pub use optim::{clip_grad_norm, lr_at, AdamConfig, OptimizerConfig};
pub use params::{matrix_dims, Grads, Param, ParamStore};
pub use real::Real;
pub use tensor::Tensor2D;
