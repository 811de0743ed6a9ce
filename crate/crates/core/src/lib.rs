//! Parallel-beam CT reconstruction fused with adaptive-patch segmentation,
//! executed over a deterministic simulated rank fabric.

pub mod config;
pub mod error;
pub mod fbp;
pub mod formats;
pub mod geometry;
pub mod partition;
pub mod phantom;
pub mod pipeline;
pub mod ranksim;
pub mod sap;
pub mod segfuse;
pub mod signal;
pub mod volume;

pub use error::{Error, Result};
