//! Browser bindings: synthesize a scene pair, inspect its ground-truth flow,
//! and warp the second frame back onto the first — all in wasm.

use wasm_bindgen::prelude::*;

use fdflow::ops::warp::warp_forward;
use fdflow::synth::{generate, SynthConfig};
use fdflow::tensor::Tensor;
use fdflow::viz::colorize;

/// One generated scene: two frames plus dense ground-truth flow, exposed to
/// JavaScript as RGBA buffers ready for `putImageData`.
#[wasm_bindgen]
pub struct Scene {
    height: usize,
    width: usize,
    img1: Tensor<f32>,
    img2: Tensor<f32>,
    flow: Tensor<f32>,
    valid: Tensor<f32>,
}

fn image_rgba(img: &Tensor<f32>) -> Vec<u8> {
    let hw = img.shape()[2] * img.shape()[3];
    let (r, g, b) = (img.plane(0, 0), img.plane(0, 1), img.plane(0, 2));
    let mut out = Vec::with_capacity(4 * hw);
    for i in 0..hw {
        out.push((r[i].clamp(0.0, 1.0) * 255.0).round() as u8);
        out.push((g[i].clamp(0.0, 1.0) * 255.0).round() as u8);
        out.push((b[i].clamp(0.0, 1.0) * 255.0).round() as u8);
        out.push(255);
    }
    out
}

fn rgb_to_rgba(rgb: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rgb.len() / 3 * 4);
    for px in rgb.chunks_exact(3) {
        out.extend_from_slice(px);
        out.push(255);
    }
    out
}

#[wasm_bindgen]
impl Scene {
    /// Renders a deterministic scene for the seed.
    #[wasm_bindgen(constructor)]
    pub fn new(height: usize, width: usize, seed: u64) -> Result<Scene, JsError> {
        let cfg = SynthConfig { height, width, ..SynthConfig::default() };
        let sample = generate(&cfg, seed, 0);
        Ok(Scene {
            height,
            width,
            img1: sample.img1,
            img2: sample.img2,
            flow: sample.flow,
            valid: sample.valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frame1_rgba(&self) -> Vec<u8> {
        image_rgba(&self.img1)
    }

    pub fn frame2_rgba(&self) -> Vec<u8> {
        image_rgba(&self.img2)
    }

    /// Ground-truth flow under the standard color wheel. `max_magnitude <= 0`
    /// selects the automatic 99th-percentile normalization.
    pub fn flow_rgba(&self, max_magnitude: f64) -> Result<Vec<u8>, JsError> {
        let max = (max_magnitude > 0.0).then_some(max_magnitude);
        let (rgb, _) = colorize(&self.flow, max).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(rgb_to_rgba(&rgb))
    }

    /// The normalization magnitude the automatic mode would pick.
    pub fn auto_max(&self) -> Result<f64, JsError> {
        let (_, used) = colorize(&self.flow, None).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(used)
    }

    /// Warps frame 2 backwards by the ground-truth flow. Away from occlusions
    /// the result lines up with frame 1 — flip between them to check.
    pub fn warped_rgba(&self) -> Result<Vec<u8>, JsError> {
        let warped =
            warp_forward(&self.img2, &self.flow).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(image_rgba(&warped))
    }

    /// Absolute photometric error |warped - frame1|, amplified and drawn
    /// grayscale, with occluded pixels tinted red.
    pub fn residual_rgba(&self) -> Result<Vec<u8>, JsError> {
        let warped =
            warp_forward(&self.img2, &self.flow).map_err(|e| JsError::new(&e.to_string()))?;
        let hw = self.height * self.width;
        let valid = self.valid.plane(0, 0);
        let mut out = Vec::with_capacity(4 * hw);
        for i in 0..hw {
            let mut err = 0.0f32;
            for c in 0..3 {
                err += (warped.plane(0, c)[i] - self.img1.plane(0, c)[i]).abs();
            }
            let level = ((err / 3.0) * 4.0 * 255.0).min(255.0) as u8;
            if valid[i] > 0.5 {
                out.extend_from_slice(&[level, level, level, 255]);
            } else {
                out.extend_from_slice(&[200, 40, 40, 255]);
            }
        }
        Ok(out)
    }

    /// Mean ground-truth displacement magnitude in pixels.
    pub fn mean_magnitude(&self) -> f64 {
        let hw = self.height * self.width;
        let (u, v) = (self.flow.plane(0, 0), self.flow.plane(0, 1));
        let mut sum = 0.0f64;
        for i in 0..hw {
            sum += (u[i] as f64).hypot(v[i] as f64);
        }
        sum / hw as f64
    }
}
