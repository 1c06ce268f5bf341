//! Monte Carlo machinery for Brownian paths constrained between two curves.
//!
//! The crate samples Brownian bridges, free Brownian motion, and their
//! band-conditioned limits (excursions, house-moving paths, Bessel-type
//! segments, meanders) on uniform time grids, estimates the first- and
//! second-order edge survival scalings that govern boundary densities, and
//! assembles both sides of the higher-order integration-by-parts identity on
//! the restricted path space so that it can be checked numerically.
//!
//! Everything is deterministic under a fixed 64-bit seed: estimators split
//! their random stream by sample index and reduce in a fixed order, so results
//! do not depend on the degree of parallelism supplied by the [`Executor`].
//!
//! The crate is `no_std`-compatible (enable the `libm` feature and disable
//! default features); an allocator is required.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(not(any(feature = "std", feature = "libm")))]
compile_error!("enable at least one of the `std` or `libm` features");

extern crate alloc;

pub mod boundary;
pub mod curve;
mod error;
pub mod exec;
pub mod functional;
pub mod grid;
pub(crate) mod math;
pub mod measure;
pub mod rng;
pub mod sampler;
pub mod verify;

pub use curve::{Band, Curve, Side, Sign, SignVector, TimeTuple};
pub use error::{Error, Result};
pub use exec::{Executor, Sequential};
pub use grid::{concat, in_band, GridPath, Partition};
pub use rng::{Prng, RngStream};
pub use sampler::{End, MCEstimate, ProcessSpec};
