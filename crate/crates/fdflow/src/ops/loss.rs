//! Per-pixel flow error reduced to a scalar.
//!
//! For prediction and target of shape (b, c, h, w) the per-pixel error is a
//! norm of the c-channel difference; the loss is its mean over all b*h*w
//! pixels. The mean (rather than a sum) keeps the value comparable across
//! resolutions, which matters when the same level weights are reused at
//! different training sizes.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    /// Euclidean norm of the channel difference. Exactly zero gradient where
    /// the difference is zero (no epsilon softening), so a perfect prediction
    /// has loss and gradient exactly zero.
    L2,
    /// `(|d|_1 + eps)^q`, the sub-linear penalty used for fine-tuning.
    Robust { eps: f64, q: f64 },
}

fn check<T: Elem>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "norm_loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    pred.dims4()
}

pub fn norm_loss_forward<T: Elem>(pred: &Tensor<T>, target: &Tensor<T>, kind: NormKind) -> Result<T> {
    let (b, c, h, w) = check(pred, target)?;
    let hw = h * w;
    let mut sum = 0.0f64;
    for bi in 0..b {
        for i in 0..hw {
            let mut l2 = 0.0f64;
            let mut l1 = 0.0f64;
            for ci in 0..c {
                let d = (pred.data()[(bi * c + ci) * hw + i] - target.data()[(bi * c + ci) * hw + i]).to_f64_();
                l2 += d * d;
                l1 += d.abs();
            }
            sum += match kind {
                NormKind::L2 => l2.sqrt(),
                NormKind::Robust { eps, q } => (l1 + eps).powf(q),
            };
        }
    }
    Ok(T::from_f64(sum / (b * hw) as f64))
}

/// Gradient of `grad_scale * loss` with respect to the prediction.
pub fn norm_loss_backward<T: Elem>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    kind: NormKind,
    grad_scale: T,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = check(pred, target)?;
    let hw = h * w;
    let inv_n = grad_scale.to_f64_() / (b * hw) as f64;
    let mut grad = Tensor::zeros(&[b, c, h, w]);
    let gd = grad.data_mut();
    for bi in 0..b {
        for i in 0..hw {
            let mut l2 = 0.0f64;
            let mut l1 = 0.0f64;
            for ci in 0..c {
                let d = (pred.data()[(bi * c + ci) * hw + i] - target.data()[(bi * c + ci) * hw + i]).to_f64_();
                l2 += d * d;
                l1 += d.abs();
            }
            for ci in 0..c {
                let idx = (bi * c + ci) * hw + i;
                let d = (pred.data()[idx] - target.data()[idx]).to_f64_();
                let g = match kind {
                    NormKind::L2 => {
                        let e = l2.sqrt();
                        if e > 0.0 {
                            d / e
                        } else {
                            0.0
                        }
                    }
                    NormKind::Robust { eps, q } => {
                        // Subgradient of |d| at zero is taken as 0.
                        let sign = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
                        q * (l1 + eps).powf(q - 1.0) * sign
                    }
                };
                gd[idx] = T::from_f64(g * inv_n);
            }
        }
    }
    Ok(grad)
}
