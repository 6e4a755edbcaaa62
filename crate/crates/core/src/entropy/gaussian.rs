//! Conditional Gaussian model for the main latents.

use crate::autograd::{std_normal_cdf, Tape, Var};
use crate::entropy::range_coder::QuantizedCdf;
use crate::entropy::P_MIN;
use crate::error::Result;
use crate::scalar::Scalar;

/// Floor on every predicted scale.
pub const SIGMA_MIN: f64 = 0.11;

/// Raw network output to scale: `sqrt(sigma_min^2 + raw^2)`.
pub fn scale_from_raw<T: Scalar>(tape: &Tape<T>, raw: &Var<T>) -> Var<T> {
    tape.sqrt(&tape.add_scalar(&tape.square(raw), SIGMA_MIN * SIGMA_MIN))
}

pub fn scale_from_raw_scalar<T: Scalar>(raw: T) -> T {
    (raw * raw + T::c(SIGMA_MIN * SIGMA_MIN)).sqrt()
}

/// Probability mass of the unit bin around `v`, clamped below at
/// [`P_MIN`]. Written in terms of `|v - mu|` so it is exactly symmetric.
pub fn likelihood<T: Scalar>(tape: &Tape<T>, v: &Var<T>, mu: &Var<T>, sigma: &Var<T>) -> Result<Var<T>> {
    let d = tape.abs(&tape.sub(v, mu)?);
    let upper = tape.phi(&tape.div(&tape.add_scalar(&tape.scale(&d, -1.0), 0.5), sigma)?);
    let lower = tape.phi(&tape.div(&tape.add_scalar(&tape.scale(&d, -1.0), -0.5), sigma)?);
    Ok(tape.lower_bound(&tape.sub(&upper, &lower)?, P_MIN))
}

/// Unclamped bin mass in double precision.
pub fn bin_mass(v: f64, mu: f64, sigma: f64) -> f64 {
    let d = (v - mu).abs();
    std_normal_cdf((0.5 - d) / sigma) - std_normal_cdf((-0.5 - d) / sigma)
}

pub fn likelihood_scalar(v: f64, mu: f64, sigma: f64) -> f64 {
    bin_mass(v, mu, sigma).max(P_MIN)
}

/// Coding table over symbols `lo..=hi`.
pub fn cdf_table(mu: f64, sigma: f64, lo: i32, hi: i32) -> Result<QuantizedCdf> {
    let probs: Vec<f64> = (lo..=hi).map(|v| bin_mass(f64::from(v), mu, sigma)).collect();
    QuantizedCdf::from_probs(lo, &probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{input_grad_error, random_tensor};
    use crate::tensor::Tensor;

    #[test]
    fn peak_mass_at_minimum_scale() {
        let want = 2.0 * std_normal_cdf(0.5 / SIGMA_MIN) - 1.0;
        let got = likelihood_scalar(3.0, 3.0, SIGMA_MIN);
        assert!((got - want).abs() < 1e-15);
        assert!((got - 1.0).abs() < 1e-5);
        assert_eq!(likelihood_scalar(0.0, 0.0, 1e12), P_MIN);
    }

    #[test]
    fn symmetric_and_bounded() {
        for &(mu, s, d) in &[(0.3, 0.5, 1.7), (-2.0, 3.0, 0.25), (10.0, 0.11, 4.0)] {
            assert_eq!(likelihood_scalar(mu + d, mu, s), likelihood_scalar(mu - d, mu, s));
            let p = likelihood_scalar(mu + d, mu, s);
            assert!(p > 0.0 && p <= 1.0);
        }
    }

    #[test]
    fn tape_matches_scalar_and_differentiates() {
        let tape = Tape::<f64>::inference();
        let v = tape.constant(Tensor::from_vec(&[3], vec![0.0, 2.0, -1.0]).unwrap());
        let mu = tape.constant(Tensor::from_vec(&[3], vec![0.2, 1.1, -3.0]).unwrap());
        let raw = tape.constant(Tensor::from_vec(&[3], vec![0.0, 0.8, 2.0]).unwrap());
        let s = scale_from_raw(&tape, &raw);
        assert!((s.value().data()[0] - SIGMA_MIN).abs() < 1e-15);
        let l = likelihood(&tape, &v, &mu, &s).unwrap();
        for i in 0..3 {
            let want = likelihood_scalar(v.value().data()[i], mu.value().data()[i], s.value().data()[i]);
            assert!((l.value().data()[i] - want).abs() < 1e-14);
        }
        let inputs = [random_tensor(&[6], 1, 2.0), random_tensor(&[6], 2, 2.0), random_tensor(&[6], 3, 1.0)];
        let e = input_grad_error(&inputs, |t, x| {
            let s = scale_from_raw(t, &x[2]);
            Ok(t.sum(&t.ln(&likelihood(t, &x[0], &x[1], &s)?)))
        });
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn table_tracks_model_cost() {
        let t = cdf_table(0.3, 1.5, -20, 20).unwrap();
        for v in -3..=3 {
            let model = -likelihood_scalar(f64::from(v), 0.3, 1.5).log2();
            assert!((t.cost_bits(v).unwrap() - model).abs() < 0.01);
        }
    }
}
