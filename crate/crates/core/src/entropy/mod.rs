//! Entropy modelling and coding of the latents.

pub mod bitstream;
pub mod codec;
pub mod context;
pub mod factorized;
pub mod gaussian;
pub mod quantize;
pub mod range_coder;

pub use bitstream::{Bitstream, Header};
pub use context::{ContextEntropy, EntropyParameters, MaskedConv};
pub use factorized::FactorizedPrior;
pub use quantize::{quantize, QuantMode};
pub use range_coder::{QuantizedCdf, RangeDecoder, RangeEncoder};

/// Floor on every modelled bin probability.
pub const P_MIN: f64 = 1.0 / 65536.0;

use crate::autograd::{Tape, Var};
use crate::scalar::Scalar;

/// `-sum(log2 p)` of a likelihood tensor.
pub fn bits<T: Scalar>(tape: &Tape<T>, likelihood: &Var<T>) -> Var<T> {
    tape.scale(&tape.sum(&tape.ln(likelihood)), -1.0 / std::f64::consts::LN_2)
}
