//! Feature extraction: a six-level pyramid encoder and a U-shape decoder.
//!
//! The encoder halves resolution at every level with channel widths
//! [32, 64, 80, 96, 112, 128]. The decoder walks back up from the coarsest
//! level: a 4x4 stride-2 transposed convolution halves the channel count,
//! the result is concatenated with the same-resolution encoder feature, and a
//! 3x3 fusion convolution brings the width back to the pyramid width. Fused
//! features therefore have the same channel counts as the encoder, so the
//! rest of the model is identical with or without the decoder.

use rand::Rng;

use crate::error::Result;
use crate::ops::conv::ConvSpec;
use crate::params::{init_conv_weight, BoundParams, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, Tensor};

pub const PYRAMID_LEVELS: usize = 6;
pub const PYRAMID_CHANNELS: [usize; PYRAMID_LEVELS] = [32, 64, 80, 96, 112, 128];
pub const IMAGE_CHANNELS: usize = 3;
pub const LEAKY_SLOPE: f64 = 0.1;
/// The finest level at which flow is estimated (quarter resolution).
pub const FINEST_LEVEL: usize = 2;

/// Registers a 3x3 convolution's weight and bias under `name.w` / `name.b`.
pub(crate) fn register_conv(
    p: &mut ModelParams,
    rng: &mut impl Rng,
    name: &str,
    in_c: usize,
    out_c: usize,
) -> Result<()> {
    let w = init_conv_weight(rng, &[out_c, in_c, 3, 3], in_c * 9);
    p.insert(&format!("{name}.w"), w)?;
    p.insert(&format!("{name}.b"), Tensor::zeros(&[out_c]))
}

fn register_conv_transpose(
    p: &mut ModelParams,
    rng: &mut impl Rng,
    name: &str,
    in_c: usize,
    out_c: usize,
) -> Result<()> {
    let w = init_conv_weight(rng, &[in_c, out_c, 4, 4], in_c * 16);
    p.insert(&format!("{name}.w"), w)?;
    p.insert(&format!("{name}.b"), Tensor::zeros(&[out_c]))
}

/// 3x3 convolution followed (optionally) by the shared leaky ReLU.
pub(crate) fn conv_layer<T: Elem>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    name: &str,
    input: Var,
    spec: ConvSpec,
    activate: bool,
) -> Result<Var> {
    let w = bp.var(&format!("{name}.w"))?;
    let b = bp.var(&format!("{name}.b"))?;
    let y = tape.conv2d(input, w, b, spec)?;
    Ok(if activate { tape.leaky_relu(y, T::from_f64(LEAKY_SLOPE)) } else { y })
}

pub fn encoder_param_count() -> usize {
    let mut total = 0;
    let mut in_c = IMAGE_CHANNELS;
    for out_c in PYRAMID_CHANNELS {
        total += 9 * in_c * out_c + out_c; // stride-2 conv
        total += 9 * out_c * out_c + out_c; // stride-1 conv
        in_c = out_c;
    }
    total
}

pub fn decoder_param_count() -> usize {
    let mut total = 0;
    for level in (FINEST_LEVEL..PYRAMID_LEVELS).rev() {
        // Step from `level + 1` down to `level`.
        let c_hi = PYRAMID_CHANNELS[level]; // channels at the coarser level
        let c_lo = PYRAMID_CHANNELS[level - 1];
        let up_c = c_hi / 2;
        total += 16 * c_hi * up_c + up_c; // 4x4 transposed conv
        total += 9 * (up_c + c_lo) * c_lo + c_lo; // fusion conv
    }
    total
}

pub fn register_encoder(p: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
    let mut in_c = IMAGE_CHANNELS;
    for (i, out_c) in PYRAMID_CHANNELS.into_iter().enumerate() {
        let level = i + 1;
        register_conv(p, rng, &format!("enc.l{level}.c0"), in_c, out_c)?;
        register_conv(p, rng, &format!("enc.l{level}.c1"), out_c, out_c)?;
        in_c = out_c;
    }
    Ok(())
}

pub fn register_decoder(p: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
    for level in (FINEST_LEVEL..PYRAMID_LEVELS).rev() {
        let c_hi = PYRAMID_CHANNELS[level];
        let c_lo = PYRAMID_CHANNELS[level - 1];
        let up_c = c_hi / 2;
        register_conv_transpose(p, rng, &format!("dec.l{level}.up"), c_hi, up_c)?;
        register_conv(p, rng, &format!("dec.l{level}.fuse"), up_c + c_lo, c_lo)?;
    }
    Ok(())
}

/// Runs the encoder; returns `[f^1, ..., f^6]` (index `level - 1`).
pub fn encoder_forward<T: Elem>(tape: &mut Tape<T>, bp: &BoundParams, image: Var) -> Result<Vec<Var>> {
    let mut features = Vec::with_capacity(PYRAMID_LEVELS);
    let mut x = image;
    for level in 1..=PYRAMID_LEVELS {
        let in_c = if level == 1 { IMAGE_CHANNELS } else { PYRAMID_CHANNELS[level - 2] };
        let out_c = PYRAMID_CHANNELS[level - 1];
        x = conv_layer(tape, bp, &format!("enc.l{level}.c0"), x, ConvSpec::new(in_c, out_c, (3, 3)).with_stride(2), true)?;
        x = conv_layer(tape, bp, &format!("enc.l{level}.c1"), x, ConvSpec::new(out_c, out_c, (3, 3)), true)?;
        features.push(x);
    }
    Ok(features)
}

/// Runs the U-shape decoder over encoder output. Returns fused features for
/// levels `FINEST_LEVEL..=6`, indexed by `level - FINEST_LEVEL`; the coarsest
/// entry is the encoder feature itself.
pub fn decoder_forward<T: Elem>(tape: &mut Tape<T>, bp: &BoundParams, encoder: &[Var]) -> Result<Vec<Var>> {
    let mut by_level = vec![encoder[PYRAMID_LEVELS - 1]; PYRAMID_LEVELS - FINEST_LEVEL + 1];
    let mut x = encoder[PYRAMID_LEVELS - 1];
    for level in (FINEST_LEVEL..PYRAMID_LEVELS).rev() {
        let c_hi = PYRAMID_CHANNELS[level];
        let c_lo = PYRAMID_CHANNELS[level - 1];
        let up_c = c_hi / 2;
        let up_w = bp.var(&format!("dec.l{level}.up.w"))?;
        let up_b = bp.var(&format!("dec.l{level}.up.b"))?;
        let up = tape.conv_transpose2d(x, up_w, up_b, 2, 1)?;
        let cat = tape.concat(&[up, encoder[level - 1]])?;
        x = conv_layer(tape, bp, &format!("dec.l{level}.fuse"), cat, ConvSpec::new(up_c + c_lo, c_lo, (3, 3)), true)?;
        by_level[level - FINEST_LEVEL] = x;
    }
    Ok(by_level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build() -> ModelParams {
        let mut p = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        register_encoder(&mut p, &mut rng).unwrap();
        register_decoder(&mut p, &mut rng).unwrap();
        p
    }

    #[test]
    fn encoder_feature_shapes_follow_the_pyramid() {
        let params = build();
        let mut tape = Tape::<f32>::new();
        let bp = BoundParams::bind(&mut tape, &params);
        let img = tape.leaf(Tensor::zeros(&[1, 3, 64, 128]));
        let feats = encoder_forward(&mut tape, &bp, img).unwrap();
        assert_eq!(feats.len(), 6);
        for (i, &f) in feats.iter().enumerate() {
            let scale = 1 << (i + 1);
            assert_eq!(
                tape.value(f).shape(),
                &[1, PYRAMID_CHANNELS[i], 64 / scale, 128 / scale],
                "level {}",
                i + 1
            );
        }
    }

    #[test]
    fn decoder_restores_pyramid_widths_at_each_level() {
        let params = build();
        let mut tape = Tape::<f32>::new();
        let bp = BoundParams::bind(&mut tape, &params);
        let img = tape.leaf(Tensor::zeros(&[1, 3, 64, 64]));
        let enc = encoder_forward(&mut tape, &bp, img).unwrap();
        let dec = decoder_forward(&mut tape, &bp, &enc).unwrap();
        assert_eq!(dec.len(), 5);
        for level in FINEST_LEVEL..=PYRAMID_LEVELS {
            let f = dec[level - FINEST_LEVEL];
            let scale = 1 << level;
            assert_eq!(
                tape.value(f).shape(),
                &[1, PYRAMID_CHANNELS[level - 1], 64 / scale, 64 / scale],
                "level {level}"
            );
        }
        // The coarsest decoder entry is the encoder feature itself.
        assert_eq!(dec[PYRAMID_LEVELS - FINEST_LEVEL], enc[PYRAMID_LEVELS - 1]);
    }

    #[test]
    fn param_counts_match_allocation() {
        let mut p = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        register_encoder(&mut p, &mut rng).unwrap();
        assert_eq!(p.total_elements(), encoder_param_count());
        let mut p = ModelParams::new();
        register_decoder(&mut p, &mut rng).unwrap();
        assert_eq!(p.total_elements(), decoder_param_count());
    }
}
