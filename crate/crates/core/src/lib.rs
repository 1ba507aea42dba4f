//! Self-supervised change detection for bi-temporal and bi-sensor image
//! archives.

pub mod archive;
pub mod change_map;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod fsutil;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod synthgen;
pub mod threshold;
pub mod trainer;

pub use error::{Error, Result};
