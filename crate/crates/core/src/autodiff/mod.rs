//! Minimal reverse-mode autodiff over dense n-dimensional arrays.
//!
//! All computation is recorded on a [`Tape`]: ops append a node holding the
//! forward value plus a backward rule, and [`Tape::backward`] replays the
//! records in exact reverse order. Two precisions are supported through the
//! [`Scalar`] trait: `f32` for training runs and `f64` for finite-difference
//! gradient verification (central differences are meaningless in single
//! precision on deep graphs).
//!
//! Layout conventions, fixed crate-wide:
//! - row-major storage everywhere;
//! - feature volumes are `(C, X, Y, Z)`, feature maps `(C, H, W)`;
//! - no broadcasting beyond scalars — shape mismatches panic.

mod check;
mod kernels;
mod snapshot;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_multi, CheckError};
pub use snapshot::{
    read_manifest, read_tensor_snapshot, write_manifest, write_tensor_snapshot, SnapshotError,
};
pub use tape::{Tape, TapeError, TensorId};
pub use tensor::{Scalar, TensorData};
