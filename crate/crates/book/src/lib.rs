//! The guide's chapters as doc comments, so `cargo test` runs every snippet.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/calibration.md")]
pub mod calibration {}
#[doc = include_str!("../../../book/src/source.md")]
pub mod source {}
#[doc = include_str!("../../../book/src/pseudo_labels.md")]
pub mod pseudo_labels {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
