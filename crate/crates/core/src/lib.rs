//! Modality-projection universal segmentation model (MPUM) at desk scale.
//!
//! The crate bundles a small reverse-mode differentiation engine, the
//! dynamic-kernel segmentation network built on it, volumetric I/O and
//! preprocessing, segmentation metrics, the training harness, the
//! metabolic-correlation statistics pipeline and kernel visualisation.

pub mod analytics;
pub mod error;
pub mod metrics;
pub mod modality;
pub mod network;
pub mod params;
pub mod projection;
pub mod tensor;
pub mod train;
pub mod viz;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
pub use modality::Modality;
