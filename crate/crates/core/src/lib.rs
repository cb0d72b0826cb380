// `!(x <= limit)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cdf;
pub mod dist;
pub mod dnc;
pub mod error;
pub mod inference;
pub mod projection;
pub mod qr;
pub mod sim;
pub mod spline;
pub mod wire;

pub use error::{Error, Result};
