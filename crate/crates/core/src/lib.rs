//! Geometry-aware vision-language-action policy with a flow-matching action
//! head, plus the simulated benchmark used to evaluate it.

pub mod backbone;
pub mod cli;
pub mod error;
pub mod expert;
pub mod fuser;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod numerics;
pub mod sim;

pub use error::{Error, Result};
