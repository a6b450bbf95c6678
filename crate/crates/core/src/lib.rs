//! Multiview compressive coding: single-frame RGB-D to 3D occupancy and color.
//!
//! The crate is organized bottom-up:
//! - [`geometry`] and [`spatial`]: cameras, unprojection, labeling, lattices.
//! - [`synthdata`] and [`bundle`]: procedural multi-view scenes with an
//!   analytic occupancy oracle, and their on-disk format.
//! - [`nn`]: a small reverse-mode differentiation engine.
//! - [`model`]: the two-tower encoder and the masked query decoder.
//! - [`train`], [`infer`], [`eval`]: optimization, grid reconstruction, metrics.
//! - [`selftest`]: gradient, masking, labeling and metric checks.

pub mod bundle;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod infer;
pub mod model;
pub mod nn;
pub mod selftest;
pub mod spatial;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
