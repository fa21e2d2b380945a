//! Conforming Trefftz continuous Galerkin method for the 2D Helmholtz equation.
//!
//! The discrete space is spanned by single-edge Helmholtz modes attached to the
//! skeleton of a Cartesian mesh and by node modes living on pairs of cells. Every
//! basis function is a finite sum of (evanescent) plane waves on each cell, so the
//! Galerkin matrix is integrated in closed form and solved by a truncated SVD.

pub mod assembly;
pub mod cli_harness;
pub mod error;
pub mod field;
pub mod highfreq_analysis;
pub mod interpolants;
pub mod mesh_geometry;
pub mod quadrature;
pub mod reference_solutions;
pub mod solver;
pub mod special;
pub mod wave_basis;

pub use error::{Result, TrefftzError};

/// A point or vector in the plane.
pub type Point = [f64; 2];
