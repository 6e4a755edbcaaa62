//! Quantisation of latents: additive uniform noise while training,
//! rounding (half away from zero) otherwise.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    Train,
    Eval,
}

/// Round half away from zero.
pub fn round_half_away<T: Scalar>(v: T) -> T {
    v.round()
}

/// Tensor-level quantisation. With a mean, eval mode rounds the residual:
/// `round(x - mu) + mu`.
pub fn quantize<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    mode: QuantMode,
    mean: Option<&Tensor<T>>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if let Some(m) = mean {
        if m.shape() != x.shape() {
            return Err(Error::Shape(format!("mean {:?} vs input {:?}", m.shape(), x.shape())));
        }
    }
    Ok(match mode {
        QuantMode::Train => {
            let mut out = x.clone();
            for v in out.data_mut() {
                *v += T::c(rng.random_range(-0.5..0.5));
            }
            out
        }
        QuantMode::Eval => match mean {
            Some(m) => x.zip_map(m, |v, mu| round_half_away(v - mu) + mu)?,
            None => x.map(round_half_away),
        },
    })
}

/// Noise injection on the tape; the gradient passes straight through.
pub fn add_uniform_noise<T: Scalar, R: Rng + ?Sized>(tape: &Tape<T>, x: &Var<T>, rng: &mut R) -> Result<Var<T>> {
    let u = Tensor::from_fn(x.shape(), |_| T::c(rng.random_range(-0.5..0.5)));
    tape.add(x, &tape.constant(u))
}

/// Rounded copy of a tape value as a constant (no gradient).
pub fn round_var<T: Scalar>(tape: &Tape<T>, x: &Var<T>) -> Var<T> {
    tape.constant(x.value().map(round_half_away))
}

/// Integer symbols of an already-rounded tensor.
pub fn to_symbols<T: Scalar>(x: &Tensor<T>) -> Result<Vec<i32>> {
    x.data()
        .iter()
        .map(|&v| {
            let f = v.f64();
            if f.fract() != 0.0 || !f.is_finite() || f.abs() > f64::from(i32::MAX) {
                Err(Error::Encode(format!("latent value {f} is not a representable integer")))
            } else {
                Ok(f as i32)
            }
        })
        .collect()
}
