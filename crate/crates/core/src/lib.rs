//! Phase-space dynamics engine for Wigner functions and classical
//! distributions, with density-matrix positivity diagnostics.
//!
//! The crate is organised bottom-up:
//!
//! * [`phasespace`]: grids, states, Gaussian initial data, quadratures, snapshots.
//! * [`potentials`]: Duffing, kicked rotor, harmonic and free potentials.
//! * [`evolve`]: split-step spectral propagators (classical/quantum, with diffusion).
//! * [`weyl`]: Weyl transform, eigen-spectra, negativity measure, Type I/II verdicts.
//! * [`sme`]: stochastic master equation for continuous position measurement.
//! * [`observables`]: time-series records and quantum/classical comparisons.

pub mod error;
pub mod evolve;
mod fft;
pub mod observables;
pub mod phasespace;
pub mod potentials;
pub mod sme;
pub mod weyl;

pub use error::{Error, Result};
