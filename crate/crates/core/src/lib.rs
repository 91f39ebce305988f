//! Convolution viewed as RoIAlign plus a fully connected layer.
//!
//! The crate provides:
//!
//! * [`tensor`]: dense row-major tensors, GEMM, seeded RNG support.
//! * [`conv`]: im2col convolution, bilinear sampling, RoIAlign, deformable
//!   convolution and RoIConv's analytic offsets, with hand-written backward
//!   passes.
//! * [`boxes`]: IoU, anchors, box coding, label assignment, NMS and the
//!   implicit-RoI alignment analysis.
//! * [`detector`]: a small single-scale AlignDet (dense proposal module plus
//!   aligned detection module) trained on synthetic scenes.
//! * [`harness`]: the verification, gradient-check, analysis and benchmark
//!   suites behind the `aligndet` command line.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boxes;
pub mod conv;
pub mod detector;
pub mod error;
pub mod harness;
pub mod numdiff;
pub mod rng;
pub mod rten;
pub mod tensor;

pub use error::{Error, Result};
