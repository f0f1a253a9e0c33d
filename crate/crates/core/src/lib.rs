// Cell/time index loops mirror the quadrature formulas; `!(x > 0.0)` guards
// deliberately reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod adjoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod controllability;
pub mod datasets;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod hjb;
pub mod io;
pub mod output;
pub mod pontryagin;

pub use error::{Error, Result};
