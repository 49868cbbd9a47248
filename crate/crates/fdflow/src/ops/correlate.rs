//! Local correlation cost volume between two feature maps.
//!
//! For every pixel x and displacement d in the (2r+1)^2 window,
//! `out(x, d) = f1(x) . f2(x + d) / N`. Displacements are laid out row-major:
//! channel `(dy + r) * (2r + 1) + (dx + r)`. Samples past the border read zero.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Elem, Tensor};

/// What the dot product is divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrNorm {
    /// Number of feature channels (the default).
    #[default]
    FeatureChannels,
    /// Number of cost-volume channels, (2r+1)^2.
    CostChannels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrSpec {
    pub radius: usize,
    pub norm: CorrNorm,
}

impl CorrSpec {
    pub fn new(radius: usize) -> Self {
        CorrSpec { radius, norm: CorrNorm::FeatureChannels }
    }

    pub fn out_channels(&self) -> usize {
        let side = 2 * self.radius + 1;
        side * side
    }

    pub fn normalizer(&self, feature_channels: usize) -> f64 {
        match self.norm {
            CorrNorm::FeatureChannels => feature_channels as f64,
            CorrNorm::CostChannels => self.out_channels() as f64,
        }
    }
}

fn check_shapes<T: Elem>(f1: &Tensor<T>, f2: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let dims = f1.dims4()?;
    if f1.shape() != f2.shape() {
        return Err(Error::shape(
            "correlate",
            format!("feature shapes differ: {:?} vs {:?}", f1.shape(), f2.shape()),
        ));
    }
    Ok(dims)
}

/// Valid output range along one axis for displacement `d`: both x and x+d in
/// bounds. Empty when the displacement exceeds the extent (tiny top levels).
#[inline]
fn valid_range(extent: usize, d: isize) -> (usize, usize) {
    let lo = (-d).clamp(0, extent as isize) as usize;
    let hi = (extent as isize - d).clamp(0, extent as isize) as usize;
    (lo, hi.max(lo))
}

pub fn correlate_forward<T: Elem>(f1: &Tensor<T>, f2: &Tensor<T>, spec: &CorrSpec) -> Result<Tensor<T>> {
    let (b, c, h, w) = check_shapes(f1, f2)?;
    let r = spec.radius as isize;
    let side = 2 * spec.radius + 1;
    let d_count = spec.out_channels();
    let hw = h * w;
    let f1_data = f1.data();
    let f2_data = f2.data();
    let recip = T::from_f64(1.0 / spec.normalizer(c));

    let mut out = Tensor::zeros(&[b, d_count, h, w]);
    parallel::par_chunks_mut(out.data_mut(), d_count * hw, |bi, out_b| {
        let f1_b = &f1_data[bi * c * hw..(bi + 1) * c * hw];
        let f2_b = &f2_data[bi * c * hw..(bi + 1) * c * hw];
        for ci in 0..c {
            let p1 = &f1_b[ci * hw..(ci + 1) * hw];
            let p2 = &f2_b[ci * hw..(ci + 1) * hw];
            for dy in -r..=r {
                let (y0, y1) = valid_range(h, dy);
                for dx in -r..=r {
                    let di = (dy + r) as usize * side + (dx + r) as usize;
                    let (x0, x1) = valid_range(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let op = &mut out_b[di * hw..(di + 1) * hw];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src1 = &p1[y * w + x0..y * w + x1];
                        let src2 = &p2[(sy * w) as usize + (x0 as isize + dx) as usize..];
                        let dst = &mut op[y * w + x0..y * w + x1];
                        for ((o, &a), &b2) in dst.iter_mut().zip(src1).zip(src2) {
                            *o = *o + a * b2;
                        }
                    }
                }
            }
        }
        for v in out_b.iter_mut() {
            *v = *v * recip;
        }
    });
    Ok(out)
}

pub fn correlate_backward<T: Elem>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    spec: &CorrSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = check_shapes(f1, f2)?;
    let r = spec.radius as isize;
    let side = 2 * spec.radius + 1;
    let d_count = spec.out_channels();
    let hw = h * w;
    if grad_out.shape() != [b, d_count, h, w] {
        return Err(Error::shape(
            "correlate_backward",
            format!("grad shape {:?}, expected [{b}, {d_count}, {h}, {w}]", grad_out.shape()),
        ));
    }
    let f1_data = f1.data();
    let f2_data = f2.data();
    let recip = T::from_f64(1.0 / spec.normalizer(c));

    let parts: Vec<(Vec<T>, Vec<T>)> = parallel::par_map_indexed(b, |bi| {
        let f1_b = &f1_data[bi * c * hw..(bi + 1) * c * hw];
        let f2_b = &f2_data[bi * c * hw..(bi + 1) * c * hw];
        // Pre-scale the upstream gradient once instead of per tap.
        let go_b: Vec<T> = grad_out.data()[bi * d_count * hw..(bi + 1) * d_count * hw]
            .iter()
            .map(|&g| g * recip)
            .collect();
        let mut g1 = vec![T::zero(); c * hw];
        let mut g2 = vec![T::zero(); c * hw];
        for ci in 0..c {
            let p1 = &f1_b[ci * hw..(ci + 1) * hw];
            let p2 = &f2_b[ci * hw..(ci + 1) * hw];
            let g1p = &mut g1[ci * hw..(ci + 1) * hw];
            let g2p = &mut g2[ci * hw..(ci + 1) * hw];
            for dy in -r..=r {
                let (y0, y1) = valid_range(h, dy);
                for dx in -r..=r {
                    let di = (dy + r) as usize * side + (dx + r) as usize;
                    let (x0, x1) = valid_range(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let gop = &go_b[di * hw..(di + 1) * hw];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s_off = sy * w + (x0 as isize + dx) as usize;
                        let n = x1 - x0;
                        for k in 0..n {
                            let g = gop[y * w + x0 + k];
                            g1p[y * w + x0 + k] = g1p[y * w + x0 + k] + g * p2[s_off + k];
                            g2p[s_off + k] = g2p[s_off + k] + g * p1[y * w + x0 + k];
                        }
                    }
                }
            }
        }
        (g1, g2)
    });

    let mut g1 = Tensor::zeros(&[b, c, h, w]);
    let mut g2 = Tensor::zeros(&[b, c, h, w]);
    for (bi, (a, b2)) in parts.into_iter().enumerate() {
        g1.data_mut()[bi * c * hw..(bi + 1) * c * hw].copy_from_slice(&a);
        g2.data_mut()[bi * c * hw..(bi + 1) * c * hw].copy_from_slice(&b2);
    }
    Ok((g1, g2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct transcription of the definition, one pixel at a time.
    fn naive_correlate(f1: &Tensor<f64>, f2: &Tensor<f64>, spec: &CorrSpec) -> Tensor<f64> {
        let (b, c, h, w) = f1.dims4().unwrap();
        let r = spec.radius as isize;
        let side = 2 * spec.radius + 1;
        let n = spec.normalizer(c);
        let mut out = Tensor::zeros(&[b, spec.out_channels(), h, w]);
        for bi in 0..b {
            for dy in -r..=r {
                for dx in -r..=r {
                    let di = (dy + r) as usize * side + (dx + r) as usize;
                    for y in 0..h {
                        for x in 0..w {
                            let (sy, sx) = (y as isize + dy, x as isize + dx);
                            if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let mut dot = 0.0;
                            for ci in 0..c {
                                dot += f1.at4(bi, ci, y, x) * f2.at4(bi, ci, sy as usize, sx as usize);
                            }
                            out.set4(bi, di, y, x, dot / n);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_definition_on_random_features() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let f1 = Tensor::<f64>::rand_uniform(&[1, 8, 5, 5], 1.0, &mut r);
        let f2 = Tensor::<f64>::rand_uniform(&[1, 8, 5, 5], 1.0, &mut r);
        let spec = CorrSpec::new(2);
        let got = correlate_forward(&f1, &f2, &spec).unwrap();
        let want = naive_correlate(&f1, &f2, &spec);
        assert_eq!(got.shape(), &[1, 25, 5, 5]);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn radius_four_produces_81_channels() {
        assert_eq!(CorrSpec::new(4).out_channels(), 81);
        let f = Tensor::<f32>::zeros(&[1, 4, 9, 9]);
        let out = correlate_forward(&f, &f, &CorrSpec::new(4)).unwrap();
        assert_eq!(out.shape(), &[1, 81, 9, 9]);
    }

    #[test]
    fn center_channel_of_identical_unit_features_is_one() {
        // f1 = f2 = all ones: dot at d = 0 is c, divided by c gives 1.
        let f = Tensor::<f32>::full(&[1, 16, 7, 7], 1.0);
        let spec = CorrSpec::new(4);
        let out = correlate_forward(&f, &f, &spec).unwrap();
        let center = spec.out_channels() / 2;
        assert!(out.plane(0, center).iter().all(|&v| v == 1.0));
        // Switching the normalizer rescales by c / (2r+1)^2.
        let alt = CorrSpec { radius: 4, norm: CorrNorm::CostChannels };
        let out2 = correlate_forward(&f, &f, &alt).unwrap();
        let want = 16.0 / 81.0;
        assert!(out2.plane(0, center).iter().all(|v| (v - want).abs() < 1e-6));
    }

    #[test]
    fn border_displacements_read_zero() {
        let f = Tensor::<f32>::full(&[1, 2, 3, 3], 1.0);
        let spec = CorrSpec::new(1);
        let out = correlate_forward(&f, &f, &spec).unwrap();
        // Channel 0 is d = (-1, -1); at pixel (0, 0) the sample is outside.
        assert_eq!(out.at4(0, 0, 0, 0), 0.0);
        assert_eq!(out.at4(0, 0, 1, 1), 1.0);
    }

    #[test]
    fn window_larger_than_feature_map_clips_cleanly() {
        // Coarsest-level maps can be smaller than the search window; every
        // displacement that leaves the map must read zero, not panic.
        let f = Tensor::<f32>::full(&[1, 4, 1, 2], 1.0);
        let spec = CorrSpec::new(4);
        let out = correlate_forward(&f, &f, &spec).unwrap();
        assert_eq!(out.shape(), &[1, 81, 1, 2]);
        let center = 40; // (dy, dx) = (0, 0)
        assert_eq!(out.at4(0, center, 0, 0), 1.0);
        assert_eq!(out.at4(0, 0, 0, 0), 0.0); // (-4, -4) is far outside
        let go = Tensor::<f32>::full(&[1, 81, 1, 2], 1.0);
        let (g1, g2) = correlate_backward(&f, &f, &spec, &go).unwrap();
        assert!(g1.all_finite() && g2.all_finite());
    }

    #[test]
    fn displacement_channel_order_is_row_major() {
        // Put a marker in f2 one pixel to the right; only d = (0, +1) sees it.
        let mut f1 = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        let mut f2 = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        f1.set4(0, 0, 2, 2, 1.0);
        f2.set4(0, 0, 2, 3, 1.0);
        let spec = CorrSpec::new(1);
        let out = correlate_forward(&f1, &f2, &spec).unwrap();
        for di in 0..9 {
            let want = if di == 5 { 1.0 } else { 0.0 }; // (dy=0, dx=+1) -> 1*3 + 2
            assert_eq!(out.at4(0, di, 2, 2), want, "channel {di}");
        }
    }
}
