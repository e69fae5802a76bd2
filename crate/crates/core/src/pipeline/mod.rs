//! Configuration, file formats, the end-to-end model and the toy trainer.

pub mod config;
pub mod dataset;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod train;

pub use config::{PipelineConfig, Profile};
pub use model::{Inference, Model};
