//! The full coarse-to-fine flow pipeline.
//!
//! Both frames run through the shared feature extractor. Starting at the
//! coarsest level, each step upsamples the previous flow (doubling its
//! values), warps the second frame's features toward the first, correlates,
//! aggregates the cost volume, and lets the level's estimator predict an
//! absolute flow. The finest estimate (quarter resolution) is bilinearly
//! upsampled twice and scaled by 4 for the full-resolution output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimator::{
    aggregation_forward, aggregation_param_count, estimator_forward, estimator_input_channels,
    estimator_param_count, register_aggregation, register_estimator, Topology,
};
use crate::features::{
    decoder_forward, decoder_param_count, encoder_forward, encoder_param_count, register_decoder,
    register_encoder, FINEST_LEVEL, IMAGE_CHANNELS, PYRAMID_LEVELS,
};
use crate::ops::correlate::{CorrNorm, CorrSpec};
use crate::params::{BoundParams, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, Tensor};

pub const CORR_RADIUS: usize = 4;
/// Input extents must be divisible by this (2^6 for six halvings).
pub const SIZE_MULTIPLE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Use the U-shape decoder features (otherwise raw encoder features).
    pub ushape: bool,
    pub topology: Topology,
    pub corr_norm: CorrNorm,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ushape: true,
            topology: Topology::Pfc,
            corr_norm: CorrNorm::FeatureChannels,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Named variants exposed on the command line. `full` is the shipping
    /// model; the others drop one ingredient for comparisons.
    pub fn variant(name: &str) -> Result<Self> {
        let base = ModelConfig::default();
        match name {
            "full" | "pfc" => Ok(base),
            "no-ushape" => Ok(ModelConfig { ushape: false, ..base }),
            "seq" => Ok(ModelConfig { topology: Topology::Sequential, ..base }),
            "dense" => Ok(ModelConfig { topology: Topology::Dense, ..base }),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected full, no-ushape, seq, dense, or pfc)"
            ))),
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match (self.ushape, self.topology) {
            (false, _) => "no-ushape",
            (true, Topology::Pfc) => "full",
            (true, Topology::Sequential) => "seq",
            (true, Topology::Dense) => "dense",
        }
    }

    /// Levels that run an estimator, coarse to fine.
    pub fn levels() -> impl Iterator<Item = usize> {
        (FINEST_LEVEL..=PYRAMID_LEVELS).rev()
    }
}

/// Per-level flows (coarse to fine) plus the upsampled full-resolution field.
pub struct ForwardFlows {
    /// `(level, flow)` pairs ordered coarse to fine, finishing at level 2.
    pub levels: Vec<(usize, Var)>,
    pub full_res: Var,
}

pub struct FlowNet {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl FlowNet {
    /// Fresh model with deterministic initialization from the config seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        register_encoder(&mut params, &mut rng)?;
        if config.ushape {
            register_decoder(&mut params, &mut rng)?;
        }
        for level in ModelConfig::levels() {
            register_aggregation(&mut params, &mut rng, level)?;
            register_estimator(&mut params, &mut rng, level, config.topology)?;
        }
        Ok(FlowNet { config, params })
    }

    /// Wraps existing parameters (e.g. from a checkpoint), verifying that they
    /// cover exactly the names a fresh model of this config would allocate.
    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let reference = FlowNet::new(config)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model wants {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model wants {}",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(FlowNet { config, params })
    }

    /// Closed-form parameter count, derived from the architecture constants
    /// rather than the allocated tensors.
    pub fn count_params(&self) -> usize {
        count_params(&self.config)
    }

    /// Writes a checkpoint whose config blob records the variant and seed.
    pub fn save_file(&self, path: &std::path::Path) -> Result<()> {
        let config = format!(
            "variant={} init_seed={}",
            self.config.variant_name(),
            self.config.init_seed
        );
        self.params.save_file(path, &config)
    }

    /// Restores a checkpoint written by [`Self::save_file`], rebuilding the
    /// model config from the embedded blob and validating every parameter.
    pub fn load_file(path: &std::path::Path) -> Result<Self> {
        let (params, blob) = ModelParams::load_file(path)?;
        let mut config: Option<ModelConfig> = None;
        let mut init_seed = 0u64;
        for pair in blob.split_whitespace() {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed config entry {pair:?}")))?;
            match key {
                "variant" => config = Some(ModelConfig::variant(value)?),
                "init_seed" => {
                    init_seed = value
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad init_seed {value:?}")))?;
                }
                other => {
                    return Err(Error::Checkpoint(format!("unknown config key {other:?}")));
                }
            }
        }
        let mut config =
            config.ok_or_else(|| Error::Checkpoint("config blob lacks a variant".into()))?;
        config.init_seed = init_seed;
        FlowNet::from_parts(config, params)
    }

    fn corr_spec(&self) -> CorrSpec {
        CorrSpec { radius: CORR_RADIUS, norm: self.config.corr_norm }
    }

    /// Runs the network on two image tensors already on the tape. Extents
    /// must be multiples of [`SIZE_MULTIPLE`]; see [`Self::infer`] for the
    /// padded path.
    pub fn forward<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        bp: &BoundParams,
        img1: Var,
        img2: Var,
    ) -> Result<ForwardFlows> {
        let (b, c, h, w) = tape.value(img1).dims4()?;
        if tape.value(img2).shape() != tape.value(img1).shape() {
            return Err(Error::shape(
                "forward",
                format!("frame shapes differ: {:?} vs {:?}", tape.value(img1).shape(), tape.value(img2).shape()),
            ));
        }
        if c != IMAGE_CHANNELS {
            return Err(Error::shape("forward", format!("frames must have {IMAGE_CHANNELS} channels, got {c}")));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::shape(
                "forward",
                format!("extents {h}x{w} must be multiples of {SIZE_MULTIPLE}"),
            ));
        }

        let enc1 = encoder_forward(tape, bp, img1)?;
        let enc2 = encoder_forward(tape, bp, img2)?;
        let (feats1, feats2) = if self.config.ushape {
            (decoder_forward(tape, bp, &enc1)?, decoder_forward(tape, bp, &enc2)?)
        } else {
            (
                enc1[FINEST_LEVEL - 1..].to_vec(),
                enc2[FINEST_LEVEL - 1..].to_vec(),
            )
        };

        let mut levels = Vec::new();
        let mut prev: Option<Var> = None;
        for level in ModelConfig::levels() {
            let f1 = feats1[level - FINEST_LEVEL];
            let f2 = feats2[level - FINEST_LEVEL];
            let (lh, lw) = (h >> level, w >> level);
            self.audit(tape, f1, &[b, crate::features::PYRAMID_CHANNELS[level - 1], lh, lw], &format!("features level {level}"))?;

            let (upflow, warped) = match prev {
                None => {
                    // Coarsest level: zero prior flow; warping would be the
                    // identity, so it is skipped.
                    let zero = tape.leaf(Tensor::zeros(&[b, 2, lh, lw]));
                    (zero, f2)
                }
                Some(pf) => {
                    let up = tape.upsample2x(pf)?;
                    let up = tape.scale(up, T::from_f64(2.0));
                    (up, tape.warp(f2, up)?)
                }
            };
            let cost = tape.correlate(f1, warped, self.corr_spec())?;
            let agg = aggregation_forward(tape, bp, level, cost)?;
            let input = tape.concat(&[agg, f1, upflow])?;
            let flow = estimator_forward(tape, bp, level, self.config.topology, input)?;
            self.audit(tape, flow, &[b, 2, lh, lw], &format!("flow level {level}"))?;
            levels.push((level, flow));
            prev = Some(flow);
        }

        let finest = levels.last().expect("at least one level").1;
        let up = tape.upsample2x(finest)?;
        let up = tape.upsample2x(up)?;
        let full_res = tape.scale(up, T::from_f64(4.0));
        self.audit(tape, full_res, &[b, 2, h, w], "full-resolution flow")?;
        Ok(ForwardFlows { levels, full_res })
    }

    fn audit<T: Elem>(&self, tape: &Tape<T>, v: Var, want: &[usize], stage: &str) -> Result<()> {
        let t = tape.value(v);
        if t.shape() != want {
            return Err(Error::shape(
                "forward",
                format!("{stage}: shape {:?}, expected {want:?}", t.shape()),
            ));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite { stage: stage.to_string() });
        }
        Ok(())
    }

    /// End-to-end inference on arbitrary extents: mirror-pads both frames to
    /// multiples of [`SIZE_MULTIPLE`], runs the network, crops the result.
    pub fn infer(&self, img1: &Tensor<f32>, img2: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, _, h, w) = img1.dims4()?;
        let p1 = pad_to_multiple(img1, SIZE_MULTIPLE)?;
        let p2 = pad_to_multiple(img2, SIZE_MULTIPLE)?;
        let mut tape = Tape::<f32>::new();
        let bp = BoundParams::bind(&mut tape, &self.params);
        let v1 = tape.leaf(p1);
        let v2 = tape.leaf(p2);
        let flows = self.forward(&mut tape, &bp, v1, v2)?;
        crop(tape.value(flows.full_res), h, w)
    }
}

pub fn count_params(config: &ModelConfig) -> usize {
    let mut total = encoder_param_count();
    if config.ushape {
        total += decoder_param_count();
    }
    for level in ModelConfig::levels() {
        total += aggregation_param_count();
        total += estimator_param_count(config.topology, estimator_input_channels(level));
    }
    total
}

/// Mirror index into `[0, n)` (boundary pixels are not repeated).
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Pads bottom and right with mirrored content until both extents are
/// multiples of `m`.
pub fn pad_to_multiple(t: &Tensor<f32>, m: usize) -> Result<Tensor<f32>> {
    let (b, c, h, w) = t.dims4()?;
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let mut out = Tensor::zeros(&[b, c, ph, pw]);
    for bi in 0..b {
        for ci in 0..c {
            let src = t.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for y in 0..ph {
                let sy = mirror(y as isize, h);
                for x in 0..pw {
                    dst[y * pw + x] = src[sy * w + mirror(x as isize, w)];
                }
            }
        }
    }
    Ok(out)
}

/// Top-left crop back to `h` x `w`.
pub fn crop(t: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (b, c, th, tw) = t.dims4()?;
    if th < h || tw < w {
        return Err(Error::shape("crop", format!("cannot crop {th}x{tw} to {h}x{w}")));
    }
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            let src = t.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for y in 0..h {
                dst[y * w..(y + 1) * w].copy_from_slice(&src[y * tw..y * tw + w]);
            }
        }
    }
    Ok(out)
}

/// One step of the receptive-field recurrence over a conv / transposed-conv
/// chain: `j` is the output pixel spacing in input pixels, `r` the field size.
#[derive(Debug, Clone, Copy)]
enum RfOp {
    Conv { k: usize, s: usize, d: usize },
    ConvT { k: usize, s: usize },
}

fn rf_walk(ops: &[RfOp]) -> usize {
    let mut r = 1usize;
    let mut j = 1usize;
    for op in ops {
        match *op {
            RfOp::Conv { k, s, d } => {
                r += (k - 1) * d * j;
                j *= s;
            }
            RfOp::ConvT { k, s } => {
                j /= s;
                r += (k - s) * j;
            }
        }
    }
    r
}

fn encoder_ops(levels: usize) -> Vec<RfOp> {
    let mut ops = Vec::new();
    for _ in 0..levels {
        ops.push(RfOp::Conv { k: 3, s: 2, d: 1 });
        ops.push(RfOp::Conv { k: 3, s: 1, d: 1 });
    }
    ops
}

/// Receptive field (in input pixels) of the level-2 encoder feature.
pub fn receptive_field_encoder_l2() -> usize {
    rf_walk(&encoder_ops(FINEST_LEVEL))
}

/// Receptive field of the level-2 U-shape decoder feature: down the full
/// pyramid and back up through the transposed convolutions and fusions.
pub fn receptive_field_decoder_l2() -> usize {
    let mut ops = encoder_ops(PYRAMID_LEVELS);
    for _ in FINEST_LEVEL..PYRAMID_LEVELS {
        ops.push(RfOp::ConvT { k: 4, s: 2 });
        ops.push(RfOp::Conv { k: 3, s: 1, d: 1 });
    }
    rf_walk(&ops)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_round_trip() {
        for name in ["full", "no-ushape", "seq", "dense"] {
            let cfg = ModelConfig::variant(name).unwrap();
            assert_eq!(cfg.variant_name(), name);
        }
        assert_eq!(ModelConfig::variant("pfc").unwrap().variant_name(), "full");
        assert!(ModelConfig::variant("bogus").is_err());
    }

    #[test]
    fn closed_form_count_matches_allocated_for_all_variants() {
        for name in ["full", "no-ushape", "seq", "dense"] {
            let net = FlowNet::new(ModelConfig::variant(name).unwrap()).unwrap();
            assert_eq!(net.count_params(), net.params.total_elements(), "{name}");
        }
    }

    #[test]
    fn forward_produces_flows_at_every_level() {
        let net = FlowNet::new(ModelConfig::default()).unwrap();
        let mut tape = Tape::<f32>::new();
        let bp = BoundParams::bind(&mut tape, &net.params);
        let i1 = tape.leaf(Tensor::zeros(&[1, 3, 64, 128]));
        let i2 = tape.leaf(Tensor::zeros(&[1, 3, 64, 128]));
        let flows = net.forward(&mut tape, &bp, i1, i2).unwrap();
        let levels: Vec<usize> = flows.levels.iter().map(|&(l, _)| l).collect();
        assert_eq!(levels, [6, 5, 4, 3, 2]);
        for &(level, f) in &flows.levels {
            assert_eq!(tape.value(f).shape(), &[1, 2, 64 >> level, 128 >> level]);
        }
        assert_eq!(tape.value(flows.full_res).shape(), &[1, 2, 64, 128]);
    }

    #[test]
    fn forward_rejects_unpadded_extents() {
        let net = FlowNet::new(ModelConfig::default()).unwrap();
        let mut tape = Tape::<f32>::new();
        let bp = BoundParams::bind(&mut tape, &net.params);
        let i1 = tape.leaf(Tensor::zeros(&[1, 3, 60, 64]));
        let i2 = tape.leaf(Tensor::zeros(&[1, 3, 60, 64]));
        assert!(net.forward(&mut tape, &bp, i1, i2).is_err());
    }

    #[test]
    fn infer_pads_and_crops_arbitrary_sizes() {
        let net = FlowNet::new(ModelConfig::variant("seq").unwrap()).unwrap();
        let i1 = Tensor::<f32>::full(&[1, 3, 70, 90], 0.3);
        let i2 = Tensor::<f32>::full(&[1, 3, 70, 90], 0.3);
        let flow = net.infer(&i1, &i2).unwrap();
        assert_eq!(flow.shape(), &[1, 2, 70, 90]);
    }

    #[test]
    fn mirror_padding_reflects_without_repeating_edges() {
        let t = Tensor::<f32>::new(vec![1, 1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = pad_to_multiple(&t, 8).unwrap();
        assert_eq!(p.shape(), &[1, 1, 8, 8]);
        // Row direction: h = 1, everything mirrors to row 0.
        assert_eq!(&p.data()[..8], &[0.0, 1.0, 2.0, 3.0, 2.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn receptive_fields_match_the_recurrence_by_hand() {
        // Encoder to level 2: k3s2, k3, k3s2, k3 gives 3, 7, 11, 19.
        assert_eq!(receptive_field_encoder_l2(), 19);
        assert!(receptive_field_decoder_l2() > receptive_field_encoder_l2());
    }
}
