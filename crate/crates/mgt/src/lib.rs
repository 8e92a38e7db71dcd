//! Multiresolution graph transformer with wavelet positional encoding.
//!
//! The crate is organized around the processing pipeline:
//!
//! - [`graph`]: attributed undirected graphs, JSON documents, permutations
//! - [`spectral`]: eigendecomposition, heat-kernel wavelets, RWPE, LapPE
//! - [`nn`]: reverse-mode autodiff tensors and neural building blocks
//! - [`equivariant`]: tensor product/contraction and the wavelet encoder
//! - [`model`]: the full multiresolution transformer and its training loss
//! - [`data`], [`metrics`], [`optim`], [`train`]: datasets, evaluation
//!   metrics, the optimizer, and the training/evaluation drivers
//! - [`testutil`]: seeded generators and the finite-difference oracle used
//!   throughout the test suites

pub mod data;
pub mod equivariant;
pub mod graph;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod spectral;
pub mod testutil;
pub mod train;
