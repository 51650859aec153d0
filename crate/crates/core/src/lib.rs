//! Skeleton-disentangled human mesh recovery on synthetic motion data.

pub mod body;
pub mod container;
pub mod dsd;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod satn;
pub mod sorting;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
