//! Complex-valued network layers built on the gradient tape.
//!
//! Complex activations are plane-stacked `[2, B, C, T, F]` arrays; channel
//! counts in this module are complex channels.

mod conv;
mod dense;
mod lstm;
mod norm;
mod prelu;

pub use conv::{ComplexConv2d, ComplexConvTranspose2d};
pub use dense::{ComplexDense, Dense};
pub use lstm::{ComplexLstm, Lstm, LstmCell, LstmState};
pub use norm::{BatchNormStats, BnMode, ComplexBatchNorm};
pub use prelu::Prelu;

/// Uniform fan-in bound for a complex weight: each plane gets
/// `1/√fan_in` scaled by `1/√2`, so the complex product keeps the variance
/// of a real layer of the same width.
pub(crate) fn complex_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt() / std::f64::consts::SQRT_2
}
