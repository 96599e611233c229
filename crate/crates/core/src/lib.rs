//! Box-free watermarking lab: a conditional image encoder/decoder pair, a
//! surrogate remover attack, and a gradient-reorienting shield (DGS) for the
//! decoder API.

pub mod attack;
pub mod dgs;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod tasks;
pub mod tensor;
pub mod watermark;

pub use error::{Error, Result};
