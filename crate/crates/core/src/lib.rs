// Validation uses `!(a <= b)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asr;
pub mod audio;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod frontends;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod targets;
pub mod training;

pub use error::{Error, Result};
