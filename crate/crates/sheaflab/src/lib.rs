//! Cellular sheaves over undirected graphs and the numerics built on them:
//! sheaf Laplacians, normalized variants, spectral checkers, constructive
//! class-separating sheaves, diffusion integrators, and a learned-sheaf
//! model with tape-based reverse-mode gradients.
//!
//! Everything is f64 and deterministic under explicit seeds. Dense
//! eigendecompositions are capped at 4096 rows; the intended scale is
//! desk-sized fixtures, not production datasets.

pub mod diffusion;
pub mod graph;
pub mod laplacian;
pub mod learn;
pub mod linalg;
pub mod oracle;
pub mod sheaf;
pub mod spectral;

pub use linalg::Mat;
