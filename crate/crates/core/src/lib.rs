//! Learns lattice dynamics with a translation-invariant convolutional model,
//! learns a coarse-graining map constrained so the same dynamics parameters
//! govern the coarse scale, and uses the resulting consistency metric to
//! decide whether a dynamical system is self-similar.
//!
//! Modules:
//! - [`tensor`] — dense f64 tensors, reverse-mode differentiation, Adam.
//! - [`systems`] — ground-truth simulators (elementary CA, 1D diffusion,
//!   latticeized Vicsek flocking).
//! - [`models`] — the dynamics learner, coarse-graining encoder and
//!   anti-triviality decoder.
//! - [`train`] — the two-stage optimization plus the jointly-trained
//!   baseline.
//! - [`analysis`] — consistency metric, self-similarity verdicts, diffusion
//!   scaling fits and noise scans.
//! - [`runner`] — config-driven experiment orchestration with on-disk
//!   artifacts.

pub mod analysis;
pub mod error;
pub mod models;
pub mod runner;
pub mod seeds;
pub mod systems;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
