//! Spectral renormalization group for a two-level dipole coupled to a quantized field.
//!
//! The engine computes the one-particle dispersion `E(p)` and the fiber ground state by
//! iterating a smooth Feshbach–Schur map on sequences of Wick-monomial kernels, and
//! validates the result against exact diagonalization on a truncated Fock space.

pub mod cli;
pub mod error;
pub mod feshbach;
pub mod firststep;
pub mod fockspace;
pub mod kernels;
pub mod model;
pub mod oracle;
pub mod rgflow;
pub mod wick;

pub use error::{Error, Result};
