// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod calibration;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod model;
pub mod rng;
pub mod source_stage;
pub mod target_stage;

pub use error::{Error, Result};

/// Label value for pixels that take no part in any loss or metric.
pub const IGNORE_LABEL: u8 = 255;
