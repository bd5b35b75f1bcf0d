//! Semiclassical simulation of four-level (double-Λ) photon echoes in an
//! inhomogeneously broadened ensemble of rare-earth ions.
//!
//! The crate is `no_std` with `alloc`. Everything here is pure computation:
//! the level model, the pulse-sequence language, density-matrix dynamics,
//! ensemble reduction, weak-field propagation, holeburning rate equations
//! and the detection/analysis helpers. File formats, the parallel runner and
//! the command-line front-end live in the `echo4` crate.
//!
//! Levels are numbered from 1, ground manifold first. With the default
//! six-level system the double-Λ is {|2⟩,|3⟩} ↔ {|4⟩,|5⟩}: the input drives
//! |2⟩→|5⟩, the rephasing pulses drive |3⟩→|5⟩ and |2⟩→|4⟩, and the echo
//! is emitted on |3⟩→|4⟩.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod detection;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod hash;
pub mod holeburning;
pub mod level;
pub mod linalg;
pub mod propagation;
pub mod quadrature;
pub mod sequence;

pub use error::{Error, Result};
pub use level::{AtomClass, DetuningModel, DetuningTable, Distribution, LevelSystem, Shape, Transition};

pub use num_complex::Complex64;

/// 2π, used wherever a frequency in Hz becomes an angular rate.
pub const TAU: f64 = core::f64::consts::TAU;
