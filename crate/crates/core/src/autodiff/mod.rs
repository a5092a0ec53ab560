//! Tape-based reverse-mode differentiation, dense networks and the AdamW optimizer.

mod nn;
mod optim;
mod params;
mod tape;

pub use nn::{swish, Activation, DenseNet};
pub use optim::{adamw_step, CosineWarmup, OptimizerMethod, OptimizerState};
pub use params::{gradient, ParamBlock, ParamVector};
pub use tape::{Gradients, Tape, Var};
