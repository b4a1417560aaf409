// `!(a > b)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod verify;
pub mod vsf;

pub use error::{Error, Result};
