//! FDFlowNet: a compact coarse-to-fine optical flow network with a U-shape
//! feature extractor and partially fused estimators, on a small CPU tensor
//! library with reverse-mode differentiation.

pub mod augment;
pub mod bench;
pub mod error;
pub mod estimator;
pub mod features;
pub mod flo;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod oracles;
pub mod params;
pub mod pipeline;
pub mod parallel;
pub mod selftest;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Elem, Tensor};
