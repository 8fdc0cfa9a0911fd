//! SE(3)-equivariant vector-neuron layers and a point-cloud auto-encoder
//! that separates a pose-invariant shape code from an equivariant pose.
//!
//! The crate is `no_std` (with `alloc`); the default `std` feature only
//! enables runtime CPU dispatch in the matrix kernels.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod layers;
pub mod loss;
pub mod model;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{PointCloud, RigidTransform};
pub use tensor::linalg::{svd3, Mat3, Svd3};
pub use tensor::{Reduction, Shape, Tape, Tensor, Var};
