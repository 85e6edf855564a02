//! Differentiable compute substrate: dense arrays, a reverse-mode tape over a
//! fixed operation vocabulary, sequential layer stacks, optimizers, finite
//! difference checking and weight checkpoints.

pub mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{bce_value, triplet_value, Backward, Graph, Var, BCE_CLAMP};
pub use layers::{LayerSpec, Sequential};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{kaiming_uniform, Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
