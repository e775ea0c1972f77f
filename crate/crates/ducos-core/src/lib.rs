//! Core of a guided depth super-resolution system trained by Lagrangian
//! dual ascent.
//!
//! Everything in this crate is pure computation over heap-allocated buffers:
//! a minimal reverse-mode autodiff tape, the fusion network and its losses,
//! the dual-ascent training loop, and a synthetic scene/degradation/metrics
//! harness. File formats, the CLI, and anything touching the filesystem live
//! in the companion `ducos` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod fusion;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod prompt;
pub mod real;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
pub use real::Real;
pub use tensor::{Grads, NdArray, Tape, Var};
