//! Constructive KAM iteration for finitely truncated short-range lattice
//! Hamiltonians in action-angle variables.
//!
//! The pipeline re-centers a model at an action point, splits it on a box,
//! solves the homological equations, applies the Lie transform of the
//! generating function and tracks weighted norms along the schedule.

pub mod cli_io;
pub mod error;
pub mod fourier_taylor;
pub mod hamiltonian_model;
pub mod homological;
pub mod kam_driver;
pub mod lattice_norms;
pub mod lie_transform;
pub mod linalg;
pub mod resonance_measure;

pub use error::{Assumption, KamError, Result};
pub use fourier_taylor::{ActionMonomial, AngleMode, FTSeries};
pub use lattice_norms::{ActionVector, LatticeMatrix, Site, WeightProfile};
