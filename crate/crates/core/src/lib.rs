//! Temporal neural operator toolkit.
//!
//! * [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode tape with
//!   the layer kernels the operator needs.
//! * [`model`]: branch / temporal-branch / trunk operator with Hadamard
//!   fusion, its ablations and a DeepONet baseline.
//! * [`data`]: finite-difference ground truth, normalisation and bundling.
//! * [`train`] and [`eval`]: two-phase training and rollout metrics.
//! * [`run`]: config files and the commands behind the `tno` binary.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod init;
pub mod model;
pub mod optim;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
