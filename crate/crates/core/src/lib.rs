//! SE(2)-equivariant graph neural networks for surrogate modelling of 2D PDEs.
//!
//! Node features are split into rotation-invariant scalar channels and
//! rotational channels (stacks of 2-vectors). Every layer aligns the
//! rotational channels with a reference axis before applying an unconstrained
//! map and rotates the result back, which keeps the whole network equivariant
//! under rotations and translations of the plane.
//!
//! Crate layout:
//!
//! - [`geom`]: rotations, edge geometry, radial basis, Delaunay, point sampling
//! - [`engine`]: dense arrays with a reverse-mode gradient tape
//! - [`layers`]: equivariant building blocks over (scalar, rotational) pairs
//! - [`model`]: the assembled network, its invariant baseline and checkpoints
//! - [`sim`]: a collocated-grid smoke solver used to generate ground truth
//! - [`data`]: Tetris and Navier-Stokes dataset builders and file formats
//! - [`train`]: losses, metrics, Adam, schedules and training loops

pub mod data;
pub mod engine;
pub mod error;
pub mod geom;
pub mod layers;
pub mod model;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
