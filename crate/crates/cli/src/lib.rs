//! Library side of the `bgrass` command: configuration and the
//! fit, simulate and validate pipelines.

pub mod config;
pub mod fit;
pub mod simulate;
pub mod validate;
