//! Wavelet-decoupled multispectral detection on hand-written `f64` kernels.
//!
//! IR and RGB images pass through a shared backbone; each level is split by a
//! Haar transform into a low band (aligned across modalities by [`lfha`]) and
//! detail bands (fused by [`hfsr`]). Two necks ([`hfe`]) mix each stream with
//! one modality's spatial pyramid, and [`fqs`] selects and decodes queries
//! over both streams. Every kernel has a hand-written VJP recorded on a
//! [`tape::Tape`], which drives gradient checks and the toy trainer.

pub mod backbone;
pub mod diagnostics;
pub mod error;
pub mod fqs;
pub mod head;
pub mod hfe;
pub mod hfsr;
pub mod layers;
pub mod lfha;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
