//! Dual meta-learning for brain tissue segmentation across age groups.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod labels;
pub mod losses;
pub mod meta;
pub mod metrics;
pub mod phantoms;
pub mod segnet;
pub mod tensorcore;

pub use error::{Error, Result};
