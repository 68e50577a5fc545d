//! Training orchestration, closed-loop evaluation and result reporting.

pub mod compare;
pub mod config;
pub mod data;
pub mod geodata;
pub mod model;
pub mod policy;
pub mod report;
pub mod schedule;
pub mod train;

pub use config::{ModelConfig, TrainConfig, Variant};
pub use model::VlaModel;
