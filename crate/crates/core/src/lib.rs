//! Numerical laboratory for a real scalar field coupled to a harmonic crystal.
//!
//! The dynamics are reduced, cell by cell in quasimomentum, to a finite
//! Hermitian operator `H(theta)` on a truncated plane-wave basis plus the
//! lattice displacement components. Everything downstream (bands, exact
//! propagators, covariance evolution, equilibrium limits and Monte-Carlo
//! ensembles) works on that reduced form.

pub mod bloch_cell;
pub mod covariance;
pub mod dispersion;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod harness;
pub mod propagator;

pub use num_complex::Complex64 as C64;

pub use bloch_cell::{CouplingSpec, GaussianTerm, ModelParams, SpectralData};
pub use error::{Error, Result};
