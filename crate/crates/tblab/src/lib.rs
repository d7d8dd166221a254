//! Tight-binding chains with Bloch band structure, gapped density matrices,
//! and locality experiments measuring how perturbations propagate.
//!
//! The crate is organized bottom-up:
//!
//! - [`lattice`]: periodic multilattices, displacement fields, strain norms,
//!   random admissible perturbations;
//! - [`tightbinding`]: exponentially decaying hopping families and real-space
//!   operator assembly on finite chains;
//! - [`bloch`]: the Bloch transform on the undeformed crystal, band
//!   structure, gap measurement, and parameter solving for target gaps;
//! - [`densitymatrix`]: zero-temperature density matrices via spectral
//!   projection and resolvent contour quadrature, derivatives, forces;
//! - [`locality`]: decay-rate fitting, perturbation response experiments,
//!   power-law scaling of sensitivities, spectral stability under complex
//!   momentum shifts.

pub mod bloch;
pub mod densitymatrix;
pub mod error;
pub mod lattice;
pub mod locality;
pub mod tightbinding;

pub use error::{Error, Result};
