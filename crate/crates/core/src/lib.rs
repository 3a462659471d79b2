//! Numerical core for posterior uncertainty of initial temperature fields in
//! coupled linear heat-conduction models.
//!
//! The crate is `no_std` and only needs an allocator. It covers finite-element
//! assembly on structured multi-part meshes, implicit-Euler simulation, adjoint
//! and tensor-train representations of the parameter-to-observable map, a
//! Laplacian-squared Gaussian prior, a matrix-free generalized eigensolver and
//! low-rank posterior variance evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod eig;
pub mod error;
pub mod factor;
pub mod femkit;
pub mod forward;
pub mod noise;
pub mod posterior;
pub mod prior;
pub mod sens;
pub mod sparse;
pub mod tt;

pub use error::{Error, Result};
pub use sparse::CsrMatrix;
