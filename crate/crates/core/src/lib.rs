//! Liver segmentation from dynamic contrast-enhanced MR series.
//!
//! The crate bundles a small reverse-mode tensor engine, the dilated FCN and
//! modified U-net builders with their three DCE input configurations, the
//! preprocessing pipeline, a synthetic DCE phantom, and the evaluation stack
//! (post-processing, DSC/HD95, paired tests).

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
mod kernels;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{BatchNormState, Mode, Tape, Var};
pub use tensor::{Element, Tensor};
