//! Training losses with analytic gradients.
//!
//! Values are accumulated in f64; gradients are returned as f32 tensors
//! shaped like the prediction. The masked variants average over the cells
//! where `mask > 0` (typically the offset neighborhoods) instead of over
//! every cell.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grad: Tensor,
}

fn check(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return shape_err(format!(
            "loss inputs differ: {} vs {}",
            pred.shape(),
            gt.shape()
        ));
    }
    if let Some(m) = mask {
        if m.shape() != pred.shape() {
            return shape_err(format!(
                "mask {} does not match {}",
                m.shape(),
                pred.shape()
            ));
        }
    }
    Ok(())
}

/// Shared reduction: `f(d)` gives (value, derivative) for one element.
fn reduce(
    pred: &Tensor,
    gt: &Tensor,
    mask: Option<&Tensor>,
    f: impl Fn(f64) -> (f64, f64),
) -> Result<Loss> {
    check(pred, gt, mask)?;
    let keep = |i: usize| mask.is_none_or(|m| m.data()[i] > 0.0);
    let count = (0..pred.len()).filter(|&i| keep(i)).count();
    let mut grad = Tensor::zeros(pred.shape());
    if count == 0 {
        return Ok(Loss { value: 0.0, grad });
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        if !keep(i) {
            continue;
        }
        let d = f64::from(pred.data()[i]) - f64::from(gt.data()[i]);
        let (v, dv) = f(d);
        total += v;
        *g = (dv * inv) as f32;
    }
    Ok(Loss {
        value: total * inv,
        grad,
    })
}

fn squared(d: f64) -> (f64, f64) {
    (d * d, 2.0 * d)
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Mean squared error over all elements.
pub fn mse_loss(pred: &Tensor, gt: &Tensor) -> Result<Loss> {
    reduce(pred, gt, None, squared)
}

/// Smooth-L1 (Huber with unit threshold), mean-reduced.
pub fn smooth_l1_loss(pred: &Tensor, gt: &Tensor) -> Result<Loss> {
    reduce(pred, gt, None, smooth_l1)
}

pub fn mse_loss_masked(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<Loss> {
    reduce(pred, gt, Some(mask), squared)
}

pub fn smooth_l1_loss_masked(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<Loss> {
    reduce(pred, gt, Some(mask), smooth_l1)
}
