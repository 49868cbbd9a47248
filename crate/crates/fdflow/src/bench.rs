//! Forward-pass timing harness.

use std::time::Instant;

use crate::error::Result;
use crate::pipeline::FlowNet;
use crate::synth::Texture;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub iters: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        // The common evaluation frame size; not a multiple of 64, so this
        // also exercises the padded inference path.
        BenchConfig { height: 436, width: 1024, iters: 10, warmup: 1 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub iters: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub params: usize,
}

fn textured_frame(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let tex = Texture::new(seed);
    let mut img = Tensor::zeros(&[1, 3, h, w]);
    for c in 0..3 {
        let plane = img.plane_mut(0, c);
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = tex.eval(x as f64, y as f64, c) as f32;
            }
        }
    }
    img
}

pub fn bench(net: &FlowNet, cfg: &BenchConfig) -> Result<BenchReport> {
    let img1 = textured_frame(1, cfg.height, cfg.width);
    let img2 = textured_frame(2, cfg.height, cfg.width);
    for _ in 0..cfg.warmup {
        net.infer(&img1, &img2)?;
    }
    let mut times = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters.max(1) {
        let start = Instant::now();
        net.infer(&img1, &img2)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = times.iter().cloned().fold(0.0f64, f64::max);
    Ok(BenchReport {
        height: cfg.height,
        width: cfg.width,
        iters: times.len(),
        mean_ms: mean,
        min_ms: min,
        max_ms: max,
        params: net.count_params(),
    })
}
