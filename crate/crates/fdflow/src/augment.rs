//! Training-time augmentation.
//!
//! Geometry is a single affine map `g` composed from mirror, rotation, zoom,
//! squeeze, and translation, applied identically to both frames:
//! `I'(x) = I(g⁻¹x)`. Because both frames move together, the flow transforms
//! exactly through the linear part `A` of `g`: `F'(x) = A · F(g⁻¹x)`.
//! Photometric jitter (shared channel gains/offsets plus per-frame noise)
//! touches the images only.

use rand::Rng;

use crate::synth::{Affine2, Sample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub mirror_prob: f64,
    /// Max rotation in radians, drawn symmetrically.
    pub max_rotate: f64,
    /// Uniform scale range.
    pub zoom: (f64, f64),
    /// Extra x-only scale range (aspect jitter).
    pub squeeze: (f64, f64),
    /// Max translation in pixels per axis, drawn symmetrically.
    pub max_translate: f64,
    /// Per-channel gain range, shared by both frames.
    pub gain: (f64, f64),
    /// Per-channel offset bound, shared by both frames.
    pub max_offset: f64,
    /// Per-pixel uniform noise bound, independent per frame.
    pub noise: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mirror_prob: 0.5,
            max_rotate: 10f64.to_radians(),
            zoom: (0.9, 1.1),
            squeeze: (0.95, 1.05),
            max_translate: 8.0,
            gain: (0.9, 1.1),
            max_offset: 0.05,
            noise: 0.02,
        }
    }
}

/// Draws the geometric map about the image center.
pub fn random_affine(cfg: &AugmentConfig, rng: &mut impl Rng, h: usize, w: usize) -> Affine2 {
    let mirror = if rng.random_bool(cfg.mirror_prob) { -1.0 } else { 1.0 };
    let rot = rng.random_range(-cfg.max_rotate..=cfg.max_rotate);
    let zoom = rng.random_range(cfg.zoom.0..=cfg.zoom.1);
    let squeeze = rng.random_range(cfg.squeeze.0..=cfg.squeeze.1);
    let t = (
        rng.random_range(-cfg.max_translate..=cfg.max_translate),
        rng.random_range(-cfg.max_translate..=cfg.max_translate),
    );
    let (sx, sy) = (zoom * squeeze * mirror, zoom / squeeze);
    let (c, s) = (rot.cos(), rot.sin());
    let a = [[c * sx, -s * sy], [s * sx, c * sy]];
    let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    Affine2::about_center(a, center, t)
}

fn bilinear_clamped(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let cx = x.clamp(0.0, (w - 1) as f64);
    let cy = y.clamp(0.0, (h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (tx, ty) = (cx - x0 as f64, cy - y0 as f64);
    let v00 = plane[y0 * w + x0] as f64;
    let v01 = plane[y0 * w + x1] as f64;
    let v10 = plane[y1 * w + x0] as f64;
    let v11 = plane[y1 * w + x1] as f64;
    let top = v00 + tx * (v01 - v00);
    let bot = v10 + tx * (v11 - v10);
    top + ty * (bot - top)
}

/// Resamples a sample through `g`, transforming flow vectors by its linear
/// part. Validity is resampled conservatively: only fully-valid support
/// counts as valid.
pub fn warp_sample(sample: &Sample, g: &Affine2) -> Sample {
    let (_, _, h, w) = sample.img1.dims4().unwrap();
    let inv = g.inverse();
    let resample = |src: &Tensor<f32>| -> Tensor<f32> {
        let (_, c, _, _) = src.dims4().unwrap();
        let mut out = Tensor::zeros(src.shape());
        for ch in 0..c {
            let plane = src.plane(0, ch);
            let dst = out.plane_mut(0, ch);
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = inv.apply(x as f64, y as f64);
                    dst[y * w + x] = bilinear_clamped(plane, h, w, sx, sy) as f32;
                }
            }
        }
        out
    };

    let img1 = resample(&sample.img1);
    let img2 = resample(&sample.img2);
    let mut flow = resample(&sample.flow);
    let mut valid = resample(&sample.valid);
    for i in 0..h * w {
        let u = flow.plane(0, 0)[i] as f64;
        let v = flow.plane(0, 1)[i] as f64;
        let (nu, nv) = g.apply_linear(u, v);
        flow.plane_mut(0, 0)[i] = nu as f32;
        flow.plane_mut(0, 1)[i] = nv as f32;
    }
    for v in valid.data_mut() {
        *v = if *v >= 1.0 { 1.0 } else { 0.0 };
    }
    Sample { img1, img2, flow, valid }
}

fn jitter_images(sample: &mut Sample, cfg: &AugmentConfig, rng: &mut impl Rng) {
    let gains: Vec<f64> = (0..3).map(|_| rng.random_range(cfg.gain.0..=cfg.gain.1)).collect();
    let offsets: Vec<f64> =
        (0..3).map(|_| rng.random_range(-cfg.max_offset..=cfg.max_offset)).collect();
    for img in [&mut sample.img1, &mut sample.img2] {
        for c in 0..3 {
            for v in img.plane_mut(0, c) {
                let noisy =
                    *v as f64 * gains[c] + offsets[c] + rng.random_range(-cfg.noise..=cfg.noise);
                *v = noisy.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let (_, _, h, w) = sample.img1.dims4().unwrap();
    let g = random_affine(cfg, rng, h, w);
    let mut out = warp_sample(sample, &g);
    jitter_images(&mut out, cfg, rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> Sample {
        generate(&SynthConfig { height: 64, width: 64, ..Default::default() }, 9, 0)
    }

    #[test]
    fn quarter_turn_is_an_exact_pixel_permutation() {
        // Rotating by 90° about the center of an even-sized image maps the
        // pixel grid onto itself, so resampling must reduce to a lookup:
        // out(x, y) = in(y, w-1-x), with flow vectors rotated the same way.
        let s = scene();
        let (h, w) = (64, 64);
        let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let g = Affine2::about_center([[0.0, -1.0], [1.0, 0.0]], center, (0.0, 0.0));
        let out = warp_sample(&s, &g);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (y, w - 1 - x);
                for c in 0..3 {
                    assert_eq!(out.img1.plane(0, c)[y * w + x], s.img1.plane(0, c)[sy * w + sx]);
                }
                let su = s.flow.plane(0, 0)[sy * w + sx];
                let sv = s.flow.plane(0, 1)[sy * w + sx];
                assert_eq!(out.flow.plane(0, 0)[y * w + x], -sv);
                assert_eq!(out.flow.plane(0, 1)[y * w + x], su);
            }
        }
    }

    #[test]
    fn identity_affine_preserves_everything() {
        let s = scene();
        let out = warp_sample(&s, &Affine2::identity());
        assert_eq!(out.img1.data(), s.img1.data());
        assert_eq!(out.flow.data(), s.flow.data());
        assert_eq!(out.valid.data(), s.valid.data());
    }

    #[test]
    fn augmented_ground_truth_stays_photometrically_consistent() {
        // The exactness argument for the generator must survive augmentation:
        // warping augmented frame 2 by the transformed flow reproduces
        // augmented frame 1 where valid (away from borders dragged in by
        // clamping).
        let s = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = AugmentConfig { noise: 0.0, ..Default::default() };
        let out = augment(&s, &cfg, &mut rng);
        let warped = crate::ops::warp::warp_forward(&out.img2, &out.flow).unwrap();
        let (h, w) = (64, 64);
        let mut err = 0.0f64;
        let mut n = 0usize;
        for y in 8..h - 8 {
            for x in 8..w - 8 {
                if out.valid.plane(0, 0)[y * w + x] == 1.0 {
                    for c in 0..3 {
                        err += (warped.plane(0, c)[y * w + x] - out.img1.plane(0, c)[y * w + x])
                            .abs() as f64;
                        n += 1;
                    }
                }
            }
        }
        assert!(n > 500, "too few valid interior pixels: {n}");
        let mean = err / n as f64;
        assert!(mean < 0.03, "photometric error {mean}");
    }

    #[test]
    fn jitter_keeps_images_in_range_and_flow_untouched() {
        let s = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = augment(&s, &AugmentConfig::default(), &mut rng);
        assert!(out.img1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.img2.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.flow.all_finite());
    }

    #[test]
    fn mirror_flips_horizontal_flow_sign() {
        let s = scene();
        let (h, w) = (64, 64);
        let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let g = Affine2::about_center([[-1.0, 0.0], [0.0, 1.0]], center, (0.0, 0.0));
        let out = warp_sample(&s, &g);
        for y in 0..h {
            for x in 0..w {
                let src = y * w + (w - 1 - x);
                assert_eq!(out.flow.plane(0, 0)[y * w + x], -s.flow.plane(0, 0)[src]);
                assert_eq!(out.flow.plane(0, 1)[y * w + x], s.flow.plane(0, 1)[src]);
            }
        }
    }
}
