//! Smooth-Feshbach spectral renormalization for a translation-invariant
//! electron coupled to a truncated, discretized photon field.
//!
//! The engine works on a finite Fock space built over a shell/direction mode
//! grid ([`fockspace`]), assembles the fibre Hamiltonian ([`hamiltonians`]),
//! decimates it with the smooth Feshbach map ([`feshbach`], [`rgflow`]) and
//! checks the flow against closed-form references ([`toyoracle`],
//! [`scalarflows`]) and the Ward-type identity ([`ward`]).

pub mod error;
pub mod feshbach;
pub mod fit;
pub mod fockspace;
pub mod hamiltonians;
pub mod linalg;
pub mod report;
pub mod rgflow;
pub mod scalarflows;
pub mod toyoracle;
pub mod ward;

pub use error::{Result, SpecRgError};
