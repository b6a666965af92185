//! Core of the DMCN super-resolution toolkit.
//!
//! Everything in this crate is pure computation over in-memory buffers: a
//! small rank-4 tensor engine with reverse-mode differentiation, the deep
//! memory connected network (DMCN) topology, the bicubic degradation
//! pipeline, PSNR/SSIM metrics and the L1/Adam training loop. File formats,
//! image decoding and the command line live in the `dmcn` crate.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. The `std` feature only enables runtime SIMD detection in the
//! matrix multiply backend and `std::error::Error` for [`Error`].

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod ops;
mod scalar;
pub mod tape;
mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
