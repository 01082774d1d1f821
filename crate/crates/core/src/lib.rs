// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod cli;
pub mod constitutive;
pub mod design;
pub mod error;
pub mod io;
pub mod math;
pub mod optimizer;
pub mod prony;
pub mod scenario;
pub mod sim;
pub mod surface;

pub use error::{Error, Result};
