//! Minimal reverse-mode automatic differentiation: a gradient tape over
//! dense `f64` tensors, the convolution/pooling/normalization ops a cell
//! network needs, and SGD-momentum / Adam optimizers with masked updates.

mod conv;
mod optim;
mod tape;

pub use conv::Conv2dSpec;
pub use optim::{clip_grad_norm, grad_norm, ElementMask, Optimizer, OptimizerKind, UpdateMask};
pub use tape::{softmax, Tape, Var};
