//! Multi-scale attention U-Net retinal vessel segmentation.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod model;
pub mod preprocess;
pub mod raster;
pub mod run;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
