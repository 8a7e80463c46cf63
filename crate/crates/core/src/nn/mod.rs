//! Initialization, optimization and the soft Dice objective.

pub mod adam;
pub mod init;
pub mod loss;

pub use adam::{AdamConfig, AdamState};
pub use init::{glorot_uniform, GlorotUniformInit};
pub use loss::{dice_loss, dice_similarity, DiceLossConfig};

use crate::tensor::Tensor;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor<f32>) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }
}
