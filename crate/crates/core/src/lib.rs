//! Fisher-aligned low-rank activation subspaces.
//!
//! Estimates activation/gradient covariances from calibration dumps, solves
//! the gradient-aligned rank-k projection problem (exactly or through a
//! randomized sketch), scores activation–gradient coupling per layer to
//! decide where the gradient-aware solve is worth its cost, and provides
//! the synthetic fixtures and toy network used to check all of it.

pub mod cli;
pub mod compress;
pub mod diagnostics;
pub mod error;
pub mod harness;
mod linalg;
pub mod pipeline;
pub mod sketch;
pub mod stats;
pub mod tensor_io;

pub use compress::{
    fasc_subspace, fisher_diag_subspace, grad_weighted_subspace, objective_j, svd_subspace, FascConfig, Method,
    Subspace,
};
pub use diagnostics::{principal_angles, rho_bootstrap, rho_correlation, rho_score, Gate, RhoReport};
pub use error::{Error, Result};
pub use sketch::{choose_sketch_size, sketched_fasc_subspace, subspace_overlap, SketchConfig};
pub use stats::{CovAccumulator, CovarianceSet};
pub use tensor_io::{read_tensor, write_tensor, Manifest, TensorBlock, TensorKind};
