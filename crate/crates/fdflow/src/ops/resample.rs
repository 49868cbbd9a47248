//! 2x bilinear upsampling and 2x average pooling.
//!
//! Upsampling places output pixel `o` at source coordinate `(o + 0.5)/2 - 0.5`
//! (half-pixel centers) and clamps taps to the border. The interpolation is
//! written in lerp form `a + t*(b - a)`, so constant inputs reproduce exactly.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Elem, Tensor};

/// Per-output-pixel tap pair along one axis: indices of the two source rows or
/// columns (already clamped) and the interpolation weight toward the second.
fn axis_taps<T: Elem>(out_extent: usize, in_extent: usize) -> Vec<(usize, usize, T)> {
    (0..out_extent)
        .map(|o| {
            let s = (o as f64 + 0.5) / 2.0 - 0.5;
            let f = s.floor();
            let t = s - f;
            let i0 = (f as isize).clamp(0, in_extent as isize - 1) as usize;
            let i1 = (f as isize + 1).clamp(0, in_extent as isize - 1) as usize;
            (i0, i1, T::from_f64(t))
        })
        .collect()
}

pub fn upsample2x_forward<T: Elem>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let ys = axis_taps::<T>(oh, h);
    let xs = axis_taps::<T>(ow, w);
    let in_data = input.data();
    let hw = h * w;

    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    parallel::par_chunks_mut(out.data_mut(), c * oh * ow, |bi, out_b| {
        for ci in 0..c {
            let plane = &in_data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            let op = &mut out_b[ci * oh * ow..(ci + 1) * oh * ow];
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                let r0 = &plane[y0 * w..(y0 + 1) * w];
                let r1 = &plane[y1 * w..(y1 + 1) * w];
                let dst = &mut op[oy * ow..(oy + 1) * ow];
                for (d, &(x0, x1, tx)) in dst.iter_mut().zip(&xs) {
                    let a = r0[x0] + tx * (r0[x1] - r0[x0]);
                    let b2 = r1[x0] + tx * (r1[x1] - r1[x0]);
                    *d = a + ty * (b2 - a);
                }
            }
        }
    });
    Ok(out)
}

/// Scatters the upstream gradient back through the bilinear taps. Needs only
/// the input extents, not the values.
pub fn upsample2x_backward<T: Elem>(in_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = match in_shape {
        &[b, c, h, w] => [b, c, h, w],
        other => {
            return Err(Error::shape("upsample2x_backward", format!("input shape {other:?} not 4-D")))
        }
    };
    let (gb, gc, goh, gow) = grad_out.dims4()?;
    if (gb, gc, goh, gow) != (b, c, 2 * h, 2 * w) {
        return Err(Error::shape(
            "upsample2x_backward",
            format!("grad shape {:?}, expected [{b}, {c}, {}, {}]", grad_out.shape(), 2 * h, 2 * w),
        ));
    }
    let ys = axis_taps::<T>(goh, h);
    let xs = axis_taps::<T>(gow, w);
    let go = grad_out.data();
    let hw = h * w;
    let one = T::one();

    let mut g = Tensor::zeros(&[b, c, h, w]);
    parallel::par_chunks_mut(g.data_mut(), c * hw, |bi, g_b| {
        for ci in 0..c {
            let gop = &go[(bi * c + ci) * goh * gow..(bi * c + ci + 1) * goh * gow];
            let gp = &mut g_b[ci * hw..(ci + 1) * hw];
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let v = gop[oy * gow + ox];
                    gp[y0 * w + x0] = gp[y0 * w + x0] + (one - tx) * (one - ty) * v;
                    gp[y0 * w + x1] = gp[y0 * w + x1] + tx * (one - ty) * v;
                    gp[y1 * w + x0] = gp[y1 * w + x0] + (one - tx) * ty * v;
                    gp[y1 * w + x1] = gp[y1 * w + x1] + tx * ty * v;
                }
            }
        }
    });
    Ok(g)
}

/// Non-overlapping 2x2 mean; extents must be even. Used to build coarse-level
/// ground truth, so it has no backward pass.
pub fn avg_pool2x<T: Elem>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avg_pool2x", format!("extents {h}x{w} not even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let out_data = out.data_mut();
    for bc in 0..b * c {
        let plane = &input.data()[bc * h * w..(bc + 1) * h * w];
        let op = &mut out_data[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                op[oy * ow + ox] =
                    (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_upsamples_bit_exactly() {
        let input = Tensor::<f32>::full(&[1, 2, 3, 5], 3.7);
        let out = upsample2x_forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 2, 6, 10]);
        assert!(out.data().iter().all(|&v| v == 3.7));
    }

    #[test]
    fn linear_ramp_upsamples_to_expected_half_pixel_samples() {
        // input(x) = x along a single row; interior outputs sample at
        // x = o/2 - 0.25, borders clamp.
        let input = Tensor::<f64>::from_fn(&[1, 1, 1, 4], |i| i as f64);
        let out = upsample2x_forward(&input).unwrap();
        let want = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{:?}", out.data());
        }
    }

    #[test]
    fn backward_conserves_gradient_mass() {
        // Bilinear weights per output pixel sum to 1, so an all-ones upstream
        // gradient scatters total mass 4*h*w onto the input.
        let go = Tensor::<f64>::full(&[1, 1, 8, 8], 1.0);
        let g = upsample2x_backward(&[1, 1, 4, 4], &go).unwrap();
        let total: f64 = g.data().iter().sum();
        assert!((total - 64.0).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_averages_quads() {
        let input = Tensor::<f32>::new(
            vec![1, 1, 2, 4],
            vec![1.0, 3.0, 10.0, 20.0, 5.0, 7.0, 30.0, 40.0],
        )
        .unwrap();
        let out = avg_pool2x(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 2]);
        assert_eq!(out.data(), &[4.0, 25.0]);
    }

    #[test]
    fn avg_pool_rejects_odd_extents() {
        assert!(avg_pool2x(&Tensor::<f32>::zeros(&[1, 1, 3, 4])).is_err());
    }
}
