//! Multi-task one-class classification with kernel null-space regression.
//!
//! Every variant learns one discriminant per task from a joint RBF kernel over
//! the training samples and scores test samples by their distance from the
//! mean projection of the task's positive training samples:
//!
//! | Variant | Training |
//! |---------|----------|
//! | `OCKSR` | per-task ridge solve with all-ones responses |
//! | `C-OCKSR` | joint ridge solve with one-hot responses |
//! | `OCKSR-L` | linear T×T structure matrix, [`linear::train_linear`] |
//! | `OCKSR-N` | RBF second layer, Tikhonov, [`nonlinear::train_nonlinear`] |
//! | `OCKSR-NS` | RBF second layer, sparse group lasso, [`sparse::train_sparse`] |

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod kernels;
pub mod linalg;
pub mod linear;
pub mod model;
pub mod nonlinear;
pub mod ocksr;
pub mod persist;
pub mod sparse;
pub mod trace;

pub use error::{Error, Result};
pub use linalg::Mat;
