//! Data generation, persistence and metrics around the training core.

pub mod checkpoint;
pub mod io;
pub mod metrics;
pub mod synthetic;
pub mod trace;
