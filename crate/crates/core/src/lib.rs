//! Numerical laboratory for harmonic maps from the unit ball into S².
//!
//! The crate builds boundary maps S² → S² with inserted conformal bubbles,
//! measures their boundary energies, Sobolev distances and degrees, and
//! minimizes the discrete Dirichlet energy on a lattice in the ball to locate
//! the point singularities that the bubbles force.

pub mod construction;
pub mod degree;
pub mod error;
pub mod estimates;
pub mod experiments;
pub mod functionals;
pub mod lattice;
pub mod maps;
pub mod minimizer;
pub mod output;
pub mod quadrature;
pub mod singularity;
pub mod sphere;

pub use error::{Error, Result};
