//! Scale-specific detection of tiny objects with template banks, a coarse
//! image pyramid and foveal heatmap prediction.

pub mod bank;
pub mod clustering;
pub mod config;
pub mod dataset;
pub mod ellipse;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod inference;
pub mod net;
pub mod pyramid;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
