//! Bohmian trajectories and the local vortex structure of moving nodal lines
//! for superpositions of 3-d harmonic-oscillator eigenstates.
//!
//! The crate is organized around the pipeline
//!
//! ```text
//! wavefield -> dynamics   (exact field + trajectory/deviation integration)
//!           -> nodal      (nodal points, line continuation, frames, node velocity)
//!           -> vortex     (second-order co-moving expansion, spiral/drift laws, Hopf)
//!           -> xstruct    (frozen co-moving flow, X-points, X-line, manifolds, tube map)
//!           -> chaos      (stretching numbers, distance to the X-line, scattering events)
//! ```
//!
//! All quantities use `m = hbar = 1`. Oscillator frequencies are explicit
//! configuration everywhere.

pub mod chaos;
pub mod dynamics;
pub mod nodal;
pub mod ode;
pub(crate) mod parallel;
pub mod vortex;
pub mod wavefield;
pub mod xstruct;

pub use num_complex::Complex64;
pub use wavefield::{FieldSample, Mode, QuantumNumbers, WavefunctionSpec};
