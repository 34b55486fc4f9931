//! Deep-ensemble uncertainty distillation for semantic segmentation.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};

/// Reserved label for pixels excluded from segmentation loss and IoU.
pub const VOID: u8 = 255;
pub mod segnet;
pub(crate) mod binio;
pub mod synthdata;
pub mod distiller;
pub mod ensemble;
pub mod metrics;
pub mod checks;
pub mod config;
pub mod pipeline;
