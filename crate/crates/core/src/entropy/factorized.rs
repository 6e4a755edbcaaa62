//! Fully factorized prior for the hyper-latents: one learned monotone
//! cumulative per channel.
//!
//! Each channel's logit-cumulative is a chain of tiny dense layers
//! `x <- softplus(H) x + b; x <- x + tanh(a) * tanh(x)`. Non-negative
//! matrices and `|tanh(a)| < 1` keep every layer non-decreasing in its
//! input, so the composed cumulative is monotone by construction.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{softplus, Tape, Var};
use crate::entropy::range_coder::QuantizedCdf;
use crate::entropy::P_MIN;
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hidden widths of the per-channel network (input and output are scalars).
pub const FILTERS: [usize; 3] = [3, 3, 3];
const INIT_SCALE: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub channels: usize,
    matrices: Vec<ParamId>,
    biases: Vec<ParamId>,
    factors: Vec<ParamId>,
}

fn widths() -> Vec<usize> {
    let mut w = vec![1];
    w.extend(FILTERS);
    w.push(1);
    w
}

impl FactorizedPrior {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize) -> Self {
        let w = widths();
        let layers = w.len() - 1;
        let scale = INIT_SCALE.powf(1.0 / layers as f64);
        init.scope(name, |init| {
            let mut matrices = Vec::new();
            let mut biases = Vec::new();
            let mut factors = Vec::new();
            for i in 0..layers {
                let h0 = (1.0 / scale / w[i + 1] as f64).exp_m1().ln();
                matrices.push(init.constant(&format!("matrix{i}"), &[channels, w[i + 1], w[i]], h0));
                biases.push(init.uniform(&format!("bias{i}"), &[channels, w[i + 1], 1], 0.5));
                if i + 1 < layers {
                    factors.push(init.constant(&format!("factor{i}"), &[channels, w[i + 1], 1], 0.0));
                }
            }
            FactorizedPrior { channels, matrices, biases, factors }
        })
    }

    /// Logit-cumulative of `v` laid out `[C, 1, n]`.
    fn logits<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, v: &Var<T>) -> Result<Var<T>> {
        let mut x = v.clone();
        for (i, (&m, &b)) in self.matrices.iter().zip(&self.biases).enumerate() {
            let h = tape.softplus(&tape.param(store, m));
            x = tape.add(&tape.bmm(&h, &x, false)?, &tape.param(store, b))?;
            if let Some(&f) = self.factors.get(i) {
                let a = tape.tanh(&tape.param(store, f));
                x = tape.add(&x, &tape.mul(&tape.tanh(&x), &a)?)?;
            }
        }
        Ok(x)
    }

    /// Per-element likelihoods of `v` (`[n, C, h, w]`), same layout.
    pub fn likelihood<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, v: &Var<T>) -> Result<Var<T>> {
        let (n, c, h, w) = v.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("factorized prior over {} channels applied to {c}", self.channels)));
        }
        let hw = h * w;
        let m = n * hw;
        let mut to_cm = Vec::with_capacity(n * c * hw);
        for ch in 0..c {
            for b in 0..n {
                for p in 0..hw {
                    to_cm.push((b * c + ch) * hw + p);
                }
            }
        }
        let mut back = vec![0; to_cm.len()];
        for (i, &s) in to_cm.iter().enumerate() {
            back[s] = i;
        }
        let flat = tape.gather(v, Rc::new(to_cm), &[c, 1, m])?;
        let lower = self.logits(tape, store, &tape.add_scalar(&flat, -0.5))?;
        let upper = self.logits(tape, store, &tape.add_scalar(&flat, 0.5))?;
        // evaluate in the tail where the sigmoid is not saturated
        let sign = Tensor::from_fn(&[c, 1, m], |i| {
            let s = lower.value().data()[i] + upper.value().data()[i];
            if s > T::zero() {
                -T::one()
            } else {
                T::one()
            }
        });
        let sign = tape.constant(sign);
        let hi = tape.sigmoid(&tape.mul(&upper, &sign)?);
        let lo = tape.sigmoid(&tape.mul(&lower, &sign)?);
        let lik = tape.lower_bound(&tape.abs(&tape.sub(&hi, &lo)?), P_MIN);
        tape.gather(&lik, Rc::new(back), &[n, c, h, w])
    }

    /// Double-precision logit-cumulative of one channel, for coding tables.
    pub fn logit_scalar<T: Scalar>(&self, store: &ParamStore<T>, channel: usize, v: f64) -> f64 {
        let w = widths();
        let mut x = vec![v];
        for (i, (&m, &b)) in self.matrices.iter().zip(&self.biases).enumerate() {
            let (fo, fi) = (w[i + 1], w[i]);
            let md = store.get(m).data();
            let bd = store.get(b).data();
            let mut y = vec![0.0; fo];
            for (o, yo) in y.iter_mut().enumerate() {
                let mut s = bd[channel * fo + o].f64();
                for (k, xk) in x.iter().enumerate() {
                    s += softplus(md[(channel * fo + o) * fi + k].f64()) * xk;
                }
                *yo = s;
            }
            if let Some(&f) = self.factors.get(i) {
                let fd = store.get(f).data();
                for (o, yo) in y.iter_mut().enumerate() {
                    *yo += fd[channel * fo + o].f64().tanh() * yo.tanh();
                }
            }
            x = y;
        }
        x[0]
    }

    fn bin_mass<T: Scalar>(&self, store: &ParamStore<T>, channel: usize, v: f64) -> f64 {
        let lo = self.logit_scalar(store, channel, v - 0.5);
        let hi = self.logit_scalar(store, channel, v + 0.5);
        let s = if lo + hi > 0.0 { -1.0 } else { 1.0 };
        (sigmoid(s * hi) - sigmoid(s * lo)).abs()
    }

    pub fn likelihood_scalar<T: Scalar>(&self, store: &ParamStore<T>, channel: usize, v: f64) -> f64 {
        self.bin_mass(store, channel, v).max(P_MIN)
    }

    /// Coding table for one channel over `lo..=hi`.
    pub fn cdf_table<T: Scalar>(&self, store: &ParamStore<T>, channel: usize, lo: i32, hi: i32) -> Result<QuantizedCdf> {
        let probs: Vec<f64> = (lo..=hi).map(|v| self.bin_mass(store, channel, f64::from(v))).collect();
        QuantizedCdf::from_probs(lo, &probs)
    }

    /// Checks finiteness and that every channel's cumulative is
    /// non-decreasing over a wide grid.
    pub fn validate<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        for &id in self.matrices.iter().chain(&self.biases).chain(&self.factors) {
            if !store.get(id).all_finite() {
                return Err(Error::Parameter(format!("{} has non-finite entries", store.name(id))));
            }
        }
        for c in 0..self.channels {
            let mut prev = f64::NEG_INFINITY;
            for k in -400..=400 {
                let l = self.logit_scalar(store, c, f64::from(k) * 0.25);
                if l < prev {
                    return Err(Error::Parameter(format!("cumulative of channel {c} decreases near {}", f64::from(k) * 0.25)));
                }
                prev = l;
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Bin mass of a generic cumulative, clamped at [`P_MIN`].
pub fn discrete_likelihood(cdf: impl Fn(f64) -> f64, v: f64) -> f64 {
    (cdf(v + 0.5) - cdf(v - 0.5)).max(P_MIN)
}
