//! Randomized structural sparsity for voxel selection.
//!
//! Stability selection where every resampling draws a row subsample, picks
//! voxels by placing spatial blocks under a per-cluster quota, averages the
//! picked voxels of each cluster into a supervoxel, and fits a sparse logistic
//! regression on the supervoxels. Selected supervoxels credit every voxel that
//! was picked for them.
//!
//! Alongside the engine the crate carries the baselines it is compared with,
//! a synthetic case/control generator with planted ground truth, k-means
//! parcellation, and precision-recall and permutation evaluation.

pub mod baselines;
pub mod clustering;
pub mod data;
pub mod eval;
pub mod rng;
pub mod solver;
pub mod stability;
pub mod synth;

pub use data::{Dataset, GridGeometry, Parcellation, StabilityScores};
pub use rng::{derive_stream, RngStream};
pub use solver::{SolverConfig, SolverSolution};
