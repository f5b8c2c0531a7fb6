//! Dual-level domain mixing for semi-supervised domain adaptation of semantic
//! segmentation, at desk scale: two domain-mixed teachers, multi-teacher
//! distillation into a student, and iterative self-training, on a procedurally
//! generated two-domain benchmark.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
mod codec;
pub mod distill;
pub mod domainmix;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod segnet;
pub mod selftrain;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use tensor::{Scalar, Tensor};
