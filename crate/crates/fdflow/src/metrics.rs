//! Flow error metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_pair(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    valid: Option<&Tensor<f32>>,
) -> Result<(usize, usize)> {
    let (b, c, h, w) = pred.dims4()?;
    if c != 2 {
        return Err(Error::shape("epe", format!("flow needs 2 channels, got {c}")));
    }
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "epe",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    if let Some(mask) = valid {
        if mask.shape() != [b, 1, h, w] {
            return Err(Error::shape(
                "epe",
                format!("valid mask {:?} vs flow {:?}", mask.shape(), pred.shape()),
            ));
        }
    }
    Ok((b, h * w))
}

/// Folds `f` over every valid pixel and returns the number of pixels visited.
/// A mask entry counts as valid when it exceeds 0.5; no mask means all-valid.
fn for_valid_pixels(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    valid: Option<&Tensor<f32>>,
    mut f: impl FnMut(f64, f64, f64, f64),
) -> Result<usize> {
    let (b, hw) = check_pair(pred, gt, valid)?;
    let mut count = 0usize;
    for bi in 0..b {
        let (pu, pv) = (pred.plane(bi, 0), pred.plane(bi, 1));
        let (gu, gv) = (gt.plane(bi, 0), gt.plane(bi, 1));
        let mask = valid.map(|m| m.plane(bi, 0));
        for i in 0..hw {
            if let Some(m) = mask {
                if m[i] <= 0.5 {
                    continue;
                }
            }
            count += 1;
            f(pu[i] as f64, pv[i] as f64, gu[i] as f64, gv[i] as f64);
        }
    }
    if count == 0 {
        return Err(Error::Config("valid mask excludes every pixel".into()));
    }
    Ok(count)
}

/// Average endpoint error in pixels over the valid pixels of every batch item.
pub fn epe(pred: &Tensor<f32>, gt: &Tensor<f32>, valid: Option<&Tensor<f32>>) -> Result<f64> {
    let mut sum = 0.0f64;
    let count = for_valid_pixels(pred, gt, valid, |pu, pv, gu, gv| {
        let (du, dv) = (pu - gu, pv - gv);
        sum += (du * du + dv * dv).sqrt();
    })?;
    Ok(sum / count as f64)
}

/// Percentage (0–100) of outlier pixels. A pixel is an inlier when its
/// endpoint error is below 3 px or below 5 % of the ground-truth magnitude;
/// everything else is an outlier.
pub fn fl_all(pred: &Tensor<f32>, gt: &Tensor<f32>, valid: Option<&Tensor<f32>>) -> Result<f64> {
    let mut outliers = 0usize;
    let count = for_valid_pixels(pred, gt, valid, |pu, pv, gu, gv| {
        let (du, dv) = (pu - gu, pv - gv);
        let err = (du * du + dv * dv).sqrt();
        let mag = (gu * gu + gv * gv).sqrt();
        if !(err < 3.0 || err < 0.05 * mag) {
            outliers += 1;
        }
    })?;
    Ok(100.0 * outliers as f64 / count as f64)
}
