#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
//! Depth-only 6D object pose registration with an iterative Hough forest
//! over scale-variant histograms of implicit B-spline control points.

pub mod error;
pub mod forest;
pub mod geometry;
pub mod harness;
pub mod hocp;
pub mod ibs;
pub mod par;
pub mod registration;
pub mod selftest;
pub mod synthbench;

pub use error::{Error, Result};
