//! Flow estimators: one per pyramid level, in three wiring topologies.
//!
//! Every estimator is seven 3x3 convolutions with hidden widths
//! [128, 128, 128, 96, 64, 32] and a linear 2-channel flow head. The two
//! narrowest hidden layers (64 and 32) use dilation 2 to widen the receptive
//! field. Topologies differ only in what each layer reads:
//!
//! * sequential - each layer reads the previous one;
//! * dense      - each layer reads the estimator input plus every earlier
//!                hidden layer;
//! * partially fused (pfc) - sequential, except the final 32-wide layer reads
//!   the full dense bundle. Nearly dense accuracy at a fraction of the cost.
//!
//! The raw 81-channel cost volume is first widened to 126 channels by a 3x3
//! aggregation convolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{conv_layer, register_conv, PYRAMID_CHANNELS};
use crate::ops::conv::ConvSpec;
use crate::params::{BoundParams, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::Elem;

pub const HIDDEN_CHANNELS: [usize; 6] = [128, 128, 128, 96, 64, 32];
/// Layers (by index into [`HIDDEN_CHANNELS`]) that use dilation 2.
pub const DILATED: [usize; 2] = [4, 5];
pub const COST_CHANNELS: usize = 81;
pub const AGGREGATED_CHANNELS: usize = 126;
pub const FLOW_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Topology {
    Sequential,
    Dense,
    #[default]
    Pfc,
}

impl Topology {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "seq" | "sequential" => Ok(Topology::Sequential),
            "dense" => Ok(Topology::Dense),
            "pfc" => Ok(Topology::Pfc),
            other => Err(Error::Config(format!(
                "unknown topology {other:?} (expected seq, dense, or pfc)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Topology::Sequential => "seq",
            Topology::Dense => "dense",
            Topology::Pfc => "pfc",
        }
    }
}

/// Channels fed to the first estimator conv at `level`: aggregated cost +
/// first-frame features + the upsampled flow from the coarser level.
pub fn estimator_input_channels(level: usize) -> usize {
    AGGREGATED_CHANNELS + PYRAMID_CHANNELS[level - 1] + FLOW_CHANNELS
}

/// Input width of each of the six hidden layers plus the flow head.
fn layer_inputs(topology: Topology, in_c: usize) -> [usize; 7] {
    let h = HIDDEN_CHANNELS;
    let dense_at = |i: usize| in_c + h[..i].iter().sum::<usize>();
    let mut ins = [0usize; 7];
    for i in 0..6 {
        ins[i] = match topology {
            Topology::Sequential => {
                if i == 0 {
                    in_c
                } else {
                    h[i - 1]
                }
            }
            Topology::Dense => dense_at(i),
            Topology::Pfc => {
                if i == 0 {
                    in_c
                } else if i == 5 {
                    dense_at(5)
                } else {
                    h[i - 1]
                }
            }
        };
    }
    ins[6] = h[5];
    ins
}

pub fn aggregation_param_count() -> usize {
    9 * COST_CHANNELS * AGGREGATED_CHANNELS + AGGREGATED_CHANNELS
}

/// Closed-form parameter count of one estimator (excluding aggregation).
pub fn estimator_param_count(topology: Topology, in_c: usize) -> usize {
    let ins = layer_inputs(topology, in_c);
    let mut total = 0;
    for i in 0..6 {
        total += 9 * ins[i] * HIDDEN_CHANNELS[i] + HIDDEN_CHANNELS[i];
    }
    total + 9 * ins[6] * FLOW_CHANNELS + FLOW_CHANNELS
}

pub fn register_aggregation(p: &mut ModelParams, rng: &mut impl Rng, level: usize) -> Result<()> {
    register_conv(p, rng, &format!("agg.l{level}"), COST_CHANNELS, AGGREGATED_CHANNELS)
}

pub fn register_estimator(
    p: &mut ModelParams,
    rng: &mut impl Rng,
    level: usize,
    topology: Topology,
) -> Result<()> {
    let ins = layer_inputs(topology, estimator_input_channels(level));
    for i in 0..6 {
        register_conv(p, rng, &format!("est.l{level}.c{i}"), ins[i], HIDDEN_CHANNELS[i])?;
    }
    register_conv(p, rng, &format!("est.l{level}.flow"), ins[6], FLOW_CHANNELS)
}

/// Aggregates a raw cost volume: 3x3 conv to 126 channels plus leaky ReLU.
pub fn aggregation_forward<T: Elem>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    level: usize,
    cost: Var,
) -> Result<Var> {
    conv_layer(
        tape,
        bp,
        &format!("agg.l{level}"),
        cost,
        ConvSpec::new(COST_CHANNELS, AGGREGATED_CHANNELS, (3, 3)),
        true,
    )
}

/// Runs one estimator; `input` carries [`estimator_input_channels`] channels.
/// Returns the 2-channel flow at the level's resolution.
pub fn estimator_forward<T: Elem>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    level: usize,
    topology: Topology,
    input: Var,
) -> Result<Var> {
    let in_c = estimator_input_channels(level);
    let ins = layer_inputs(topology, in_c);
    let mut hidden: Vec<Var> = Vec::with_capacity(6);
    for i in 0..6 {
        let src = match topology {
            Topology::Sequential => {
                if i == 0 {
                    input
                } else {
                    hidden[i - 1]
                }
            }
            Topology::Dense => {
                let mut parts = vec![input];
                parts.extend_from_slice(&hidden);
                tape.concat(&parts)?
            }
            Topology::Pfc => {
                if i == 0 {
                    input
                } else if i == 5 {
                    let mut parts = vec![input];
                    parts.extend_from_slice(&hidden);
                    tape.concat(&parts)?
                } else {
                    hidden[i - 1]
                }
            }
        };
        let mut spec = ConvSpec::new(ins[i], HIDDEN_CHANNELS[i], (3, 3));
        if DILATED.contains(&i) {
            spec = spec.with_dilation(2).with_padding(2);
        }
        let out = conv_layer(tape, bp, &format!("est.l{level}.c{i}"), src, spec, true)?;
        hidden.push(out);
    }
    conv_layer(
        tape,
        bp,
        &format!("est.l{level}.flow"),
        hidden[5],
        ConvSpec::new(ins[6], FLOW_CHANNELS, (3, 3)),
        false,
    )
}
