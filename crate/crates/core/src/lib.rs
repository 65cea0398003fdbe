//! Structure-guided diffusion for pose-driven avatar video at small scale.
//!
//! The crate is `no_std` + `alloc`: every module is a pure computation over
//! in-memory values. File formats, configuration and the command line live in
//! the `anchorgen` companion crate.
#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod enhance;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod scheduler;
pub mod sgdm;
pub mod temporal;
pub mod training;
pub mod world;

pub use error::{Error, Result};
