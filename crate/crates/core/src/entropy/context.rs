//! Autoregressive context model (5x5 masked convolution) and the 1x1 fusion
//! stack that turns hyper features plus context into Gaussian parameters.
//!
//! Two evaluation paths exist. The tape path convolves whole tensors for
//! training and rate estimation. The serial path computes the parameters of
//! a single position with plain loops over causal taps only; encoder and
//! decoder both use it, so their tables agree bit for bit.

use rand::Rng;

use crate::autograd::{ConvGeom, Var};
use crate::entropy::gaussian::{scale_from_raw, scale_from_raw_scalar};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Ctx, LEAKY_SLOPE};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CONTEXT_KERNEL: usize = 5;
const K: usize = CONTEXT_KERNEL;
const C: usize = K / 2;

/// True for taps strictly before the centre in raster order.
pub fn is_causal_tap(ky: usize, kx: usize) -> bool {
    ky < C || (ky == C && kx < C)
}

fn mask_tensor<T: Scalar>(c_out: usize, c_in: usize) -> Tensor<T> {
    Tensor::from_fn(&[c_out, c_in, K, K], |i| {
        let t = i % (K * K);
        if is_causal_tap(t / K, t % K) {
            T::one()
        } else {
            T::zero()
        }
    })
}

#[derive(Clone, Debug)]
pub struct MaskedConv {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl MaskedConv {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, c_in: usize, c_out: usize) -> Self {
        // only the 12 causal taps carry signal
        let bound = (3.0 / (c_in * (K * K / 2)) as f64).sqrt();
        init.scope(name, |init| {
            let mut w = Tensor::uniform(&[c_out, c_in, K, K], -bound, bound, &mut *init.rng);
            let mask = mask_tensor::<T>(c_out, c_in);
            for (v, m) in w.data_mut().iter_mut().zip(mask.data()) {
                *v *= *m;
            }
            let w = init.tensor("w", w);
            let b = init.constant("b", &[c_out], 0.0);
            MaskedConv { w, b, c_in, c_out }
        })
    }

    /// Rejects kernels with any weight on the centre or a future tap.
    pub fn validate_mask<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let w = store.get(self.w);
        for (i, v) in w.data().iter().enumerate() {
            let t = i % (K * K);
            if !is_causal_tap(t / K, t % K) && *v != T::zero() {
                return Err(Error::Parameter(format!(
                    "context kernel has weight {v} at non-causal tap ({}, {})",
                    t / K,
                    t % K
                )));
            }
        }
        Ok(())
    }

    /// Whole-tensor evaluation. The mask is re-applied so training can never
    /// move weight onto a non-causal tap.
    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, y: &Var<T>) -> Result<Var<T>> {
        let t = cx.tape;
        let w = t.mul(&cx.p(self.w), &t.constant(mask_tensor(self.c_out, self.c_in)))?;
        t.conv2d(y, &w, Some(&cx.p(self.b)), ConvGeom::new(1, C))
    }
}

/// Three 1x1 convolutions, `4M -> 10M/3 -> 8M/3 -> 2M`, leaky in between.
#[derive(Clone, Debug)]
pub struct EntropyParameters {
    pub layers: [Conv2d; 3],
    pub m: usize,
}

impl EntropyParameters {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, m: usize) -> Self {
        let (w1, w2) = ((10 * m).div_ceil(3), (8 * m).div_ceil(3));
        init.scope(name, |init| EntropyParameters {
            layers: [
                Conv2d::new(init, "fuse0", 4 * m, w1, 1, 1, true),
                Conv2d::new(init, "fuse1", w1, w2, 1, 1, true),
                Conv2d::new(init, "fuse2", w2, 2 * m, 1, 1, true),
            ],
            m,
        })
    }

    /// `(mu, sigma)` from hyper features and context features (`2M` each).
    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, hyper: &Var<T>, context: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let t = cx.tape;
        let (n1, c1, h1, w1) = hyper.dims4()?;
        let (n2, c2, h2, w2) = context.dims4()?;
        if (n1, h1, w1) != (n2, h2, w2) || c1 != 2 * self.m || c2 != 2 * self.m {
            return Err(Error::Shape(format!(
                "entropy parameters over {} latents got hyper {:?} and context {:?}",
                self.m,
                hyper.shape(),
                context.shape()
            )));
        }
        let mut x = t.concat(&[hyper, context])?;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(cx, &x)?;
            if i < 2 {
                x = cx.lrelu(&x);
            }
        }
        let mu = t.slice(&x, 0, self.m)?;
        let raw = t.slice(&x, self.m, self.m)?;
        Ok((mu, scale_from_raw(t, &raw)))
    }
}

/// Context model and fusion stack for one latent tensor.
#[derive(Clone, Debug)]
pub struct ContextEntropy {
    pub context: MaskedConv,
    pub params: EntropyParameters,
    pub m: usize,
}

impl ContextEntropy {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, m: usize) -> Self {
        init.scope(name, |init| ContextEntropy {
            context: MaskedConv::new(init, "context", m, 2 * m),
            params: EntropyParameters::new(init, "entropy", m),
            m,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, y_hat: &Var<T>, hyper: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let ctx = self.context.forward(cx, y_hat)?;
        self.params.forward(cx, hyper, &ctx)
    }

    pub fn serial<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> Result<SerialParams<'a, T>> {
        self.context.validate_mask(store)?;
        Ok(SerialParams {
            m: self.m,
            ctx_w: store.get(self.context.w).data(),
            ctx_b: store.get(self.context.b).data(),
            fuse: self
                .params
                .layers
                .iter()
                .map(|l| {
                    let b = l.b.map(|b| store.get(b).data()).unwrap_or(&[]);
                    (store.get(l.w).data(), b, l.c_in, l.c_out)
                })
                .collect(),
        })
    }
}

/// Borrowed weights for per-position evaluation.
pub struct SerialParams<'a, T> {
    m: usize,
    ctx_w: &'a [T],
    ctx_b: &'a [T],
    fuse: Vec<(&'a [T], &'a [T], usize, usize)>,
}

impl<T: Scalar> SerialParams<'_, T> {
    /// Context features at `(py, px)` of a single `[M, h, w]` latent, read
    /// from causal positions only.
    pub fn context_at(&self, y_hat: &[T], h: usize, w: usize, py: usize, px: usize) -> Vec<T> {
        let m = self.m;
        let mut out: Vec<T> = self.ctx_b.to_vec();
        for (o, acc) in out.iter_mut().enumerate() {
            for ky in 0..=C {
                let yy = py as isize + ky as isize - C as isize;
                if yy < 0 {
                    continue;
                }
                for kx in 0..K {
                    if !is_causal_tap(ky, kx) {
                        break;
                    }
                    let xx = px as isize + kx as isize - C as isize;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let (yy, xx) = (yy as usize, xx as usize);
                    for c in 0..m {
                        *acc += self.ctx_w[((o * m + c) * K + ky) * K + kx] * y_hat[(c * h + yy) * w + xx];
                    }
                }
            }
        }
        out
    }

    /// `(mu, sigma)` for every channel at `(py, px)`; `hyper` is a single
    /// `[2M, h, w]` feature map.
    pub fn params_at(&self, y_hat: &[T], hyper: &[T], h: usize, w: usize, py: usize, px: usize) -> (Vec<T>, Vec<T>) {
        let m = self.m;
        let hw = h * w;
        let p = py * w + px;
        let mut x: Vec<T> = (0..2 * m).map(|c| hyper[c * hw + p]).collect();
        x.extend(self.context_at(y_hat, h, w, py, px));
        for (i, &(wt, b, c_in, c_out)) in self.fuse.iter().enumerate() {
            let mut y = vec![T::zero(); c_out];
            for (o, yo) in y.iter_mut().enumerate() {
                let mut s = if b.is_empty() { T::zero() } else { b[o] };
                for (k, xk) in x.iter().enumerate().take(c_in) {
                    s += wt[o * c_in + k] * *xk;
                }
                *yo = if i < 2 && s < T::zero() { s * T::c(LEAKY_SLOPE) } else { s };
            }
            x = y;
        }
        let sigma = x[m..].iter().map(|&r| scale_from_raw_scalar(r)).collect();
        x.truncate(m);
        (x, sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::entropy::gaussian::SIGMA_MIN;
    use crate::gradcheck::{input_grad_error, param_grad_error, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(m: usize, seed: u64) -> (ParamStore<f64>, ContextEntropy) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ce = ContextEntropy::new(&mut Init::new(&mut store, &mut rng), "ce", m);
        (store, ce)
    }

    #[test]
    fn mask_is_structurally_causal() {
        let (mut store, ce) = model(3, 1);
        ce.context.validate_mask(&store).unwrap();
        let w = store.get(ce.context.w);
        assert_eq!(w.data().iter().filter(|v| **v != 0.0).count(), 6 * 3 * 12);
        // centre tap of the first filter
        let idx = 2 * K + 2;
        store.get_mut(ce.context.w).data_mut()[idx] = 0.1;
        assert!(matches!(ce.context.validate_mask(&store), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_latents_give_bias_only_context() {
        let (mut store, ce) = model(2, 2);
        store.set(ce.context.b, Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap()).unwrap();
        let tape = Tape::inference();
        let y = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let c = ce.context.forward(Ctx::new(&tape, &store), &y).unwrap();
        for ch in 0..4 {
            for p in 0..16 {
                assert_eq!(c.value().data()[ch * 16 + p], [0.5, -1.0, 2.0, 0.0][ch]);
            }
        }
    }

    #[test]
    fn zero_everything_gives_minimum_scale() {
        let (mut store, ce) = model(3, 3);
        store.zero_all();
        let tape = Tape::inference();
        let hyper = tape.constant(Tensor::zeros(&[1, 6, 2, 3]));
        let y = tape.constant(Tensor::zeros(&[1, 3, 2, 3]));
        let (mu, sigma) = ce.forward(Ctx::new(&tape, &store), &y, &hyper).unwrap();
        assert_eq!(mu.shape(), &[1, 3, 2, 3]);
        assert!(mu.value().data().iter().all(|&v| v == 0.0));
        assert!(sigma.value().data().iter().all(|&v| v == SIGMA_MIN));
    }

    #[test]
    fn serial_path_matches_whole_tensor_path() {
        let (store, ce) = model(3, 4);
        let (h, w) = (5, 6);
        let y = random_tensor(&[1, 3, h, w], 5, 3.0).map(f64::round);
        let hyper = random_tensor(&[1, 6, h, w], 6, 1.0);
        let tape = Tape::inference();
        let (mu, sigma) = ce
            .forward(Ctx::new(&tape, &store), &tape.constant(y.clone()), &tape.constant(hyper.clone()))
            .unwrap();
        let serial = ce.serial(&store).unwrap();
        for py in 0..h {
            for px in 0..w {
                let (m, s) = serial.params_at(y.data(), hyper.data(), h, w, py, px);
                for c in 0..3 {
                    let i = (c * h + py) * w + px;
                    assert!((m[c] - mu.value().data()[i]).abs() < 1e-12);
                    assert!((s[c] - sigma.value().data()[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let (store, ce) = model(2, 7);
        let hyper = random_tensor(&[1, 4, 3, 3], 8, 1.0);
        let ctx = random_tensor(&[1, 4, 3, 3], 9, 1.0);
        let f = |t: &Tape<f64>, s: &ParamStore<f64>, a: &Var<f64>, b: &Var<f64>| {
            let (mu, sigma) = ce.params.forward(Ctx::new(t, s), a, b)?;
            t.add(&t.sum(&t.square(&mu)), &t.sum(&t.ln(&sigma)))
        };
        let e = input_grad_error(&[hyper.clone(), ctx.clone()], |t, v| f(t, &store, &v[0], &v[1]));
        assert!(e < 1e-4, "{e}");
        let e = param_grad_error(&store, 8, 10, |t, s| f(t, s, &t.constant(hyper.clone()), &t.constant(ctx.clone())));
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (store, ce) = model(2, 1);
        let tape = Tape::inference();
        let a = tape.constant(Tensor::zeros(&[1, 4, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1, 4, 3, 2]));
        assert!(matches!(ce.params.forward(Ctx::new(&tape, &store), &a, &b), Err(Error::Shape(_))));
    }
}
