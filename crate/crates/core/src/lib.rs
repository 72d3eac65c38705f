//! Anti-UAV perception toolkit.

pub mod checks;
pub mod edl;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metric;
pub mod pipeline;
pub mod rdm;
pub mod simulator;

pub use error::{Error, Result};
