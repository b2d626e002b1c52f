//! Dense tensors, reverse-mode differentiation, Adam and the checkpoint
//! format. Everything else in the crate builds on this module.

pub mod checkpoint;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::AdamState;
pub use params::{Param, ParamBuilder, ParamId, ParamSet};
pub use rng::Rng;
pub use tape::{relative_index, smoothed_targets, Fault, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;
