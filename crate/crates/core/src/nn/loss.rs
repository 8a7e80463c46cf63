use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiceLossConfig {
    pub smoothing: f64,
}

impl Default for DiceLossConfig {
    fn default() -> Self {
        DiceLossConfig { smoothing: 1e-5 }
    }
}

/// Numerator `2Σxy + s` and denominator `Σx² + Σy² + s` of the soft Dice.
pub(crate) fn dice_terms<T: Element>(pred: &[T], target: &[T], s: T) -> (T, T) {
    let mut xy = T::zero();
    let mut xx = T::zero();
    let mut yy = T::zero();
    for (&x, &y) in pred.iter().zip(target) {
        xy = xy + x * y;
        xx = xx + x * x;
        yy = yy + y * y;
    }
    (xy + xy + s, xx + yy + s)
}

fn check<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, s: f64) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "dice: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if s <= 0.0 {
        return Err(Error::invalid("dice smoothing must be positive"));
    }
    if target.data().iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::invalid("dice target must be binary"));
    }
    if pred.data().iter().any(|&x| !(x >= T::zero() && x <= T::one())) {
        return Err(Error::invalid("dice prediction must lie in [0, 1]"));
    }
    Ok(())
}

/// `(2Σxy + s) / (Σx² + Σy² + s)`.
pub fn dice_similarity<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, config: DiceLossConfig) -> Result<f64> {
    check(pred, target, config.smoothing)?;
    let (a, b) = dice_terms(pred.data(), target.data(), T::from_f64_lossy(config.smoothing));
    Ok((a / b).as_f64())
}

pub fn dice_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, config: DiceLossConfig) -> Result<f64> {
    Ok(1.0 - dice_similarity(pred, target, config)?)
}
