//! Files, images and the command line around `dmcn-core`.
//!
//! * [`checkpoint`]: the binary tensor container and checkpoint encoding
//! * [`config`]: `key = value` run configuration
//! * [`io`]: PNG files, directory listings, patch manifests
//! * [`report`]: CSV output and aligned text tables
//! * [`commands`]: `prepare`, `train`, `eval`, `sr`, `ablate`, `flops`

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod io;
pub mod report;

pub use error::{Error, Result};
