//! Tensor arithmetic, reverse-mode differentiation, optimisation and
//! parameter storage shared by every model component.

mod bundle;
mod gradcheck;
mod graph;
mod optim;
pub mod rng;
mod tensor;

pub use bundle::{Bound, Bundle, Checkpoint, Entry};
pub use gradcheck::{grad_check, FD_STEP};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use tensor::Tensor;
