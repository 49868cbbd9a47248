//! Reference implementations of the matching kernels, written as direct
//! loops with no blocking, fast paths, or range precomputation. They exist
//! to validate the optimized versions and to back `selftest`; nothing in the
//! model calls them.

use crate::error::Result;
use crate::ops::conv::ConvSpec;
use crate::ops::correlate::CorrSpec;
use crate::tensor::{Elem, Tensor};

/// Seven-loop convolution with zero padding.
pub fn naive_conv2d<T: Elem>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (b, c_in, h, w) = input.dims4()?;
    let (oh, ow) = spec.out_size(h, w)?;
    let (kh, kw) = spec.kernel;
    let mut out = Tensor::zeros(&[b, spec.out_channels, oh, ow]);
    for bi in 0..b {
        for oc in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[oc].to_f64_();
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                    - spec.padding as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv = weight
                                    .at4(oc, ic, ky, kx)
                                    .to_f64_();
                                let xv = input.at4(bi, ic, iy as usize, ix as usize).to_f64_();
                                acc += wv * xv;
                            }
                        }
                    }
                    out.set4(bi, oc, oy, ox, T::from_f64(acc));
                }
            }
        }
    }
    Ok(out)
}

/// Triple-loop cost volume: for each pixel and displacement, the dot product
/// of the feature vectors, zero past the border, divided by the normalizer.
pub fn naive_correlate<T: Elem>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    spec: &CorrSpec,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = f1.dims4()?;
    let r = spec.radius as isize;
    let side = 2 * spec.radius + 1;
    let norm = spec.normalizer(c);
    let mut out = Tensor::zeros(&[b, spec.out_channels(), h, w]);
    for bi in 0..b {
        for dy in -r..=r {
            for dx in -r..=r {
                let di = (dy + r) as usize * side + (dx + r) as usize;
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let (y2, x2) = (y + dy, x + dx);
                        if y2 < 0 || x2 < 0 || y2 >= h as isize || x2 >= w as isize {
                            continue;
                        }
                        let mut acc = 0.0;
                        for ci in 0..c {
                            acc += f1.at4(bi, ci, y as usize, x as usize).to_f64_()
                                * f2.at4(bi, ci, y2 as usize, x2 as usize).to_f64_();
                        }
                        out.set4(bi, di, y as usize, x as usize, T::from_f64(acc / norm));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear sample of one plane with zero padding, the warp convention.
pub fn bilinear_zero_pad(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (tx, ty) = (x - x0, y - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
        for (dx, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
            let (sx, sy) = (x0 + dx, y0 + dy);
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 || wx * wy == 0.0 {
                continue;
            }
            acc += wx * wy * plane[sy as usize * w + sx as usize];
        }
    }
    acc
}
