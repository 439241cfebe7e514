pub mod cli;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod kmeans;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pc_moe;
pub mod pseudo_labels;
pub mod tensor;
pub mod trainer;
pub mod workbench;

pub use error::{ClaspError, Result};
