//! Minimal Taylor-Hood (P2-P1) finite-element layer on structured
//! triangulations of the unit square.

pub mod assemble;
pub mod infsup;
pub mod mesh;
pub mod quadrature;
pub mod solver;
pub mod space;
pub mod sparse;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("mesh subdivision must be at least 2, got {0}")]
    MeshTooSmall(usize),
    #[error("entry outside the fixed sparsity pattern")]
    PatternMismatch,
    #[error("sparse solver: {0}")]
    Solver(String),
}

pub use assemble::{
    assemble_convection, assemble_convection_into, assemble_divergence, assemble_load,
    assemble_mass, assemble_operators, assemble_stiffness, convection_apply, pressure_error_l2,
    trilinear_b, velocity_error_norms, Operators,
};
pub use infsup::inf_sup_proxy;
pub use mesh::{generate_mesh, Mesh, Triangle};
pub use solver::{csr_to_csc, lu_factor, Factorization, SparseLuSymbolic};
pub use space::{build_spaces, FeSpaces};
pub use sparse::{CsrBuilder, SparseMatrix};