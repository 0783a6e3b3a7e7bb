//! Desk-scale block-spin renormalization group for the lattice φ⁴ model.
//!
//! The crate is organised bottom-up: lattices and fields, block averaging,
//! the exactly solvable Gaussian flow, localized Green's functions and their
//! random-walk expansions, polymer combinatorics, polymer functionals, the
//! cluster expansion, one small-field RG step, and the coupling-flow solver.

pub mod averaging;
pub mod cluster;
pub mod flow;
pub mod functional;
pub mod gaussian_flow;
pub mod greens;
pub mod lattice;
pub mod linalg;
pub mod polymer;
pub mod quadrature;
pub mod rg_step;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("lattice mismatch: {0}")]
    LatticeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cap exceeded: {0}")]
    CapExceeded(String),
    #[error("singular or indefinite operator: {0}")]
    Singular(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("field outside domain: {0}")]
    Domain(String),
    #[error("no contraction: {0}")]
    NoContraction(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use lattice::{Field, Region, TorusLattice};
