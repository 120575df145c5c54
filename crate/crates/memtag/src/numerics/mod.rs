//! Minimal dense numeric core: f64 tensors, a reverse-mode tape covering the
//! operations the networks need, the Adam optimizer, a binary parameter
//! container, and a finite-difference gradient checker.
//!
//! Everything is 64-bit and single-threaded by design; determinism across
//! runs falls out of fixed evaluation order.

mod checkpoint;
mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{read_params, read_params_file, write_params, write_params_file};
pub use gradcheck::{grad_check, max_rel_err_over_store, GradCheckEntry};
pub use optim::Adam;
pub use tape::{Axis, NodeId, ParamId, ParamStore, Parameter, Tape};
pub use tensor::{init, Tensor};
