//! Synthetic training scenes with exact ground-truth flow.
//!
//! A scene is a moving textured background plus a few star-shaped textured
//! polygons, each with its own rigid motion. Textures are procedural value
//! noise evaluable at any real coordinate, so the second frame is rendered
//! analytically and the ground truth is exact rather than resampled:
//! frame 2 at pixel y shows the topmost layer whose motion carries some
//! frame-1 point onto y, and the flow at a frame-1 pixel is simply its own
//! layer's motion. A pixel is flagged occluded when its destination is
//! covered by a different layer or leaves the image.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Row-major 2x2 linear part plus translation: `T(x) = A x + b`.
#[derive(Debug, Clone, Copy)]
pub struct Affine2 {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl Affine2 {
    pub fn identity() -> Self {
        Affine2 { a: [[1.0, 0.0], [0.0, 1.0]], b: [0.0, 0.0] }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine2 { a: [[1.0, 0.0], [0.0, 1.0]], b: [tx, ty] }
    }

    /// `A (x - c) + c + t` for a linear map about a fixed center.
    pub fn about_center(a: [[f64; 2]; 2], center: (f64, f64), t: (f64, f64)) -> Self {
        let (cx, cy) = center;
        let b = [
            cx - (a[0][0] * cx + a[0][1] * cy) + t.0,
            cy - (a[1][0] * cx + a[1][1] * cy) + t.1,
        ];
        Affine2 { a, b }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a[0][0] * x + self.a[0][1] * y + self.b[0],
            self.a[1][0] * x + self.a[1][1] * y + self.b[1],
        )
    }

    /// Linear part only, for transforming flow vectors.
    pub fn apply_linear(&self, u: f64, v: f64) -> (f64, f64) {
        (self.a[0][0] * u + self.a[0][1] * v, self.a[1][0] * u + self.a[1][1] * v)
    }

    pub fn inverse(&self) -> Self {
        let det = self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0];
        let inv = [
            [self.a[1][1] / det, -self.a[0][1] / det],
            [-self.a[1][0] / det, self.a[0][0] / det],
        ];
        let b = [
            -(inv[0][0] * self.b[0] + inv[0][1] * self.b[1]),
            -(inv[1][0] * self.b[0] + inv[1][1] * self.b[1]),
        ];
        Affine2 { a: inv, b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MotionModel {
    /// Every layer translates; magnitudes are uniform in
    /// `[0, max_translation]`, so the mean displacement is half the max.
    Translation,
    /// Overlaid polygons additionally rotate (up to [`MAX_ROTATION_DEG`]) and
    /// scale (within [`SCALE_RANGE`]) about their centers. The background
    /// still only translates, which keeps the scene translation-dominant.
    #[default]
    Affine,
}

/// Rotation bound for affine layer motion, degrees.
pub const MAX_ROTATION_DEG: f64 = 10.0;
/// Scale bounds for affine layer motion.
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Scenes carry 1..=max_layers polygons over the background.
    pub max_layers: usize,
    pub motion: MotionModel,
    pub max_translation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 192,
            width: 192,
            max_layers: 4,
            motion: MotionModel::Affine,
            max_translation: 16.0,
        }
    }
}

/// One training example. Images are RGB in [0, 1]; flow maps frame 1 onto
/// frame 2 in pixels; `valid` is 1 where the target stays in view and
/// unoccluded.
#[derive(Debug, Clone)]
pub struct Sample {
    pub img1: Tensor<f32>,
    pub img2: Tensor<f32>,
    pub flow: Tensor<f32>,
    pub valid: Tensor<f32>,
}

// ─── procedural texture ──────────────────────────────────────────────────

fn hash64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic lattice value in [0, 1).
fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = hash64(seed ^ (ix as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ (iy as u64).wrapping_mul(0xc2b2ae3d27d4eb4f));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Multi-octave smoothed value noise, evaluable at any real coordinate.
#[derive(Debug, Clone, Copy)]
pub struct Texture {
    seed: u64,
}

const OCTAVES: [(f64, f64); 3] = [(1.0 / 24.0, 1.0), (1.0 / 11.0, 0.5), (1.0 / 5.0, 0.25)];

impl Texture {
    pub fn new(seed: u64) -> Self {
        Texture { seed }
    }

    pub fn eval(&self, x: f64, y: f64, channel: usize) -> f64 {
        let mut acc = 0.0;
        let mut norm = 0.0;
        for (o, &(freq, amp)) in OCTAVES.iter().enumerate() {
            let seed = hash64(self.seed ^ ((channel as u64) << 32) ^ (o as u64 + 1));
            let (sx, sy) = (x * freq, y * freq);
            let (ix, iy) = (sx.floor(), sy.floor());
            let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
            let (tx, ty) = (smooth(sx - ix), smooth(sy - iy));
            let (ix, iy) = (ix as i64, iy as i64);
            let v00 = lattice(seed, ix, iy);
            let v01 = lattice(seed, ix + 1, iy);
            let v10 = lattice(seed, ix, iy + 1);
            let v11 = lattice(seed, ix + 1, iy + 1);
            let top = v00 + tx * (v01 - v00);
            let bot = v10 + tx * (v11 - v10);
            acc += amp * (top + ty * (bot - top));
            norm += amp;
        }
        acc / norm
    }
}

// ─── star-shaped polygons ────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct StarPoly {
    center: (f64, f64),
    /// Vertices in angle-sorted order around the center.
    verts: Vec<(f64, f64)>,
    angles: Vec<f64>,
}

impl StarPoly {
    fn sample(rng: &mut impl Rng, h: usize, w: usize) -> Self {
        const TAU: f64 = std::f64::consts::TAU;
        let center = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let n = rng.random_range(3..=6usize);
        let base_r = rng.random_range(18.0..60.0f64);
        // Jittered evenly-spaced angles: every angular gap stays strictly
        // under 180 deg (at n = 3 the worst case is 1.4/3 of a turn), which
        // keeps the shape genuinely star-shaped about its center — the
        // sector membership test in `contains` is exact only then.
        let phase = rng.random_range(0.0..TAU);
        let mut angles: Vec<f64> = (0..n)
            .map(|i| {
                let jitter = rng.random_range(0.3..0.7);
                (phase + TAU * (i as f64 + jitter) / n as f64).rem_euclid(TAU)
            })
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let verts = angles
            .iter()
            .map(|&a| {
                let r = base_r * rng.random_range(0.5..1.0);
                (center.0 + r * a.cos(), center.1 + r * a.sin())
            })
            .collect();
        StarPoly { center, verts, angles }
    }

    /// Point test via the sector containing the point's angle: the polygon is
    /// star-shaped about its center, so the point is inside exactly when it
    /// lies on the center's side of that sector's edge.
    fn contains(&self, x: f64, y: f64) -> bool {
        let a = (y - self.center.1).atan2(x - self.center.0).rem_euclid(std::f64::consts::TAU);
        let n = self.verts.len();
        // Find the sector [angles[i], angles[i+1]) that holds `a`; angles are
        // sorted, with wraparound before angles[0] belonging to the last edge.
        let mut i = n - 1;
        for j in 0..n - 1 {
            if a >= self.angles[j] && a < self.angles[j + 1] {
                i = j;
                break;
            }
        }
        let (x1, y1) = self.verts[i];
        let (x2, y2) = self.verts[(i + 1) % n];
        let edge_side = |px: f64, py: f64| (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
        let s_point = edge_side(x, y);
        let s_center = edge_side(self.center.0, self.center.1);
        s_point * s_center >= 0.0
    }
}

// ─── scene assembly ──────────────────────────────────────────────────────

struct Layer {
    poly: Option<StarPoly>, // None: background, covers everything
    texture: Texture,
    motion: Affine2,
    inverse: Affine2,
}

/// The sampled motion parameters of one layer, exposed so tests can check
/// rendered flow against the generator's own bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct LayerMotion {
    /// False for the background.
    pub polygon: bool,
    pub translation: (f64, f64),
    /// Radians; zero for translation-only layers.
    pub rotation: f64,
    /// 1.0 for translation-only layers.
    pub scale: f64,
    pub motion: Affine2,
}

fn sample_motion(
    rng: &mut impl Rng,
    cfg: &SynthConfig,
    center: (f64, f64),
    polygon: bool,
) -> LayerMotion {
    let dir = rng.random_range(0.0..std::f64::consts::TAU);
    let mag = rng.random_range(0.0..cfg.max_translation);
    let t = (mag * dir.cos(), mag * dir.sin());
    // The background always translates only: it covers most of the frame, so
    // this keeps the scene's mean motion near half the translation bound.
    let (rotation, scale) = match (cfg.motion, polygon) {
        (MotionModel::Affine, true) => (
            rng.random_range(-MAX_ROTATION_DEG.to_radians()..MAX_ROTATION_DEG.to_radians()),
            rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1),
        ),
        _ => (0.0, 1.0),
    };
    let (c, s) = (rotation.cos() * scale, rotation.sin() * scale);
    let motion = if rotation == 0.0 && scale == 1.0 {
        Affine2::translation(t.0, t.1)
    } else {
        Affine2::about_center([[c, -s], [s, c]], center, t)
    };
    LayerMotion { polygon, translation: t, rotation, scale, motion }
}

/// Deterministic sample `index` of the virtual dataset named by `seed`,
/// together with each layer's sampled motion (background first).
pub fn generate_with_motions(cfg: &SynthConfig, seed: u64, index: u64) -> (Sample, Vec<LayerMotion>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1)); // stream 0 is the seed's default
    let (h, w) = (cfg.height, cfg.width);
    let img_center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);

    let mut layers = Vec::new();
    let mut motions = Vec::new();
    let bg = sample_motion(&mut rng, cfg, img_center, false);
    motions.push(bg);
    layers.push(Layer {
        poly: None,
        texture: Texture::new(rng.random()),
        motion: bg.motion,
        inverse: bg.motion.inverse(),
    });
    let n_layers = rng.random_range(1..=cfg.max_layers);
    for _ in 0..n_layers {
        let poly = StarPoly::sample(&mut rng, h, w);
        let m = sample_motion(&mut rng, cfg, poly.center, true);
        motions.push(m);
        layers.push(Layer {
            poly: Some(poly),
            texture: Texture::new(rng.random()),
            motion: m.motion,
            inverse: m.motion.inverse(),
        });
    }

    // Topmost layer covering a frame-1 position.
    let top1 = |x: f64, y: f64| -> usize {
        for l in (0..layers.len()).rev() {
            match &layers[l].poly {
                Some(p) => {
                    if p.contains(x, y) {
                        return l;
                    }
                }
                None => return l,
            }
        }
        0
    };
    // Topmost layer covering a frame-2 position: the layer's frame-1 shape
    // carried forward by its motion.
    let top2 = |x: f64, y: f64| -> usize {
        for l in (0..layers.len()).rev() {
            match &layers[l].poly {
                Some(p) => {
                    let (sx, sy) = layers[l].inverse.apply(x, y);
                    if p.contains(sx, sy) {
                        return l;
                    }
                }
                None => return l,
            }
        }
        0
    };

    let mut img1 = Tensor::<f32>::zeros(&[1, 3, h, w]);
    let mut img2 = Tensor::<f32>::zeros(&[1, 3, h, w]);
    let mut flow = Tensor::<f32>::zeros(&[1, 2, h, w]);
    let mut valid = Tensor::<f32>::zeros(&[1, 1, h, w]);

    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let i = y * w + x;

            let l1 = top1(fx, fy);
            for c in 0..3 {
                img1.plane_mut(0, c)[i] = layers[l1].texture.eval(fx, fy, c) as f32;
            }
            let (tx, ty) = layers[l1].motion.apply(fx, fy);
            flow.plane_mut(0, 0)[i] = (tx - fx) as f32;
            flow.plane_mut(0, 1)[i] = (ty - fy) as f32;
            let in_view = tx >= 0.0 && tx <= (w - 1) as f64 && ty >= 0.0 && ty <= (h - 1) as f64;
            valid.plane_mut(0, 0)[i] = if in_view && top2(tx, ty) == l1 { 1.0 } else { 0.0 };

            let l2 = top2(fx, fy);
            let (sx, sy) = layers[l2].inverse.apply(fx, fy);
            for c in 0..3 {
                img2.plane_mut(0, c)[i] = layers[l2].texture.eval(sx, sy, c) as f32;
            }
        }
    }

    (Sample { img1, img2, flow, valid }, motions)
}

/// Deterministic sample `index` of the virtual dataset named by `seed`.
pub fn generate(cfg: &SynthConfig, seed: u64, index: u64) -> Sample {
    generate_with_motions(cfg, seed, index).0
}

/// Parses `synthetic:SEED:COUNT[:SIZE[:MOTION]]` into a config plus seed and
/// count; MOTION is `affine` (default) or `translation`.
pub fn parse_dataset_uri(uri: &str) -> crate::error::Result<(SynthConfig, u64, usize)> {
    let parts: Vec<&str> = uri.split(':').collect();
    let fail = |msg: &str| {
        crate::error::Error::Config(format!(
            "bad dataset {uri:?}: {msg} (expected synthetic:SEED:COUNT[:SIZE[:MOTION]])"
        ))
    };
    if parts.first() != Some(&"synthetic") || parts.len() < 3 || parts.len() > 5 {
        return Err(fail("unknown scheme or wrong field count"));
    }
    let seed: u64 = parts[1].parse().map_err(|_| fail("seed is not an integer"))?;
    let count: usize = parts[2].parse().map_err(|_| fail("count is not an integer"))?;
    let mut cfg = SynthConfig::default();
    if let Some(sz) = parts.get(3) {
        let size: usize = sz.parse().map_err(|_| fail("size is not an integer"))?;
        cfg.height = size;
        cfg.width = size;
    }
    if let Some(motion) = parts.get(4) {
        cfg.motion = match *motion {
            "affine" => MotionModel::Affine,
            "translation" => MotionModel::Translation,
            _ => return Err(fail("motion must be affine or translation")),
        };
    }
    Ok((cfg, seed, count))
}

pub fn generate_set(cfg: &SynthConfig, seed: u64, count: usize) -> Vec<Sample> {
    crate::parallel::par_map_indexed(count, |i| generate(cfg, seed, i as u64))
}
