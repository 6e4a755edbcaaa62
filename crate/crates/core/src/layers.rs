//! Parameterised building blocks shared by the transforms.

use rand::Rng;

use crate::autograd::{ConvGeom, Tape, Var};
use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Slope of every leaky rectifier in the network.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Tape plus the parameter values a forward pass reads from.
#[derive(Clone, Copy)]
pub struct Ctx<'a, T> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>) -> Self {
        Ctx { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<T> {
        self.tape.param(self.store, id)
    }

    pub fn lrelu(&self, x: &Var<T>) -> Var<T> {
        self.tape.leaky_relu(x, LEAKY_SLOPE)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub geom: ConvGeom,
}

impl Conv2d {
    /// Same-padded convolution (`pad = k / 2`).
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        Self::with_gain(init, name, c_in, c_out, k, stride, bias, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        let pad = if k % 2 == 1 { k / 2 } else { 0 };
        init.scope(name, |init| {
            let w = init.uniform("w", &[c_out, c_in, k, k], bound);
            let b = bias.then(|| init.constant("b", &[c_out], 0.0));
            Conv2d { w, b, c_in, c_out, k, geom: ConvGeom::new(stride, pad) }
        })
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = cx.p(self.w);
        let b = self.b.map(|b| cx.p(b));
        cx.tape.conv2d(x, &w, b.as_ref(), self.geom)
    }
}

/// Stride-2 transposed convolution that exactly doubles resolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub geom: ConvGeom,
}

impl ConvTranspose2d {
    pub fn up2<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
    ) -> Self {
        Self::up2_with_gain(init, name, c_in, c_out, k, bias, 1.0)
    }

    pub fn up2_with_gain<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        // each output pixel receives roughly c_in * k^2 / 4 contributions
        let fan = (c_in * k * k) as f64 / 4.0;
        let bound = gain * (3.0 / fan.max(1.0)).sqrt();
        init.scope(name, |init| {
            let w = init.uniform("w", &[c_in, c_out, k, k], bound);
            let b = bias.then(|| init.constant("b", &[c_out], 0.0));
            ConvTranspose2d { w, b, c_in, c_out, k, geom: ConvGeom::upsample2(k) }
        })
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = cx.p(self.w);
        let b = self.b.map(|b| cx.p(b));
        cx.tape.conv_transpose2d(x, &w, b.as_ref(), self.geom)
    }
}

/// A stride-2 resampling convolution: strided down or transposed up.
#[derive(Clone, Debug)]
pub enum Resample {
    Down(Conv2d),
    Up(ConvTranspose2d),
}

impl Resample {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        up: bool,
        bias: bool,
    ) -> Self {
        Self::with_gain(init, name, c_in, c_out, k, up, bias, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        up: bool,
        bias: bool,
        gain: f64,
    ) -> Self {
        if up {
            Resample::Up(ConvTranspose2d::up2_with_gain(init, name, c_in, c_out, k, bias, gain))
        } else {
            Resample::Down(Conv2d::with_gain(init, name, c_in, c_out, k, 2, bias, gain))
        }
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Resample::Down(c) => c.forward(cx, x),
            Resample::Up(c) => c.forward(cx, x),
        }
    }
}

/// `x + conv_k(lrelu(conv_k(x)))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub channels: usize,
}

impl ResidualBlock {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize, k: usize) -> Self {
        init.scope(name, |init| ResidualBlock {
            conv1: Conv2d::new(init, "conv1", channels, channels, k, 1, true),
            conv2: Conv2d::with_gain(init, "conv2", channels, channels, k, 1, true, 0.5),
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.conv1.forward(cx, x)?;
        let h = cx.lrelu(&h);
        let h = self.conv2.forward(cx, &h)?;
        cx.tape.add(x, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{input_grad_error, param_grad_error, random_tensor};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rb(channels: usize, seed: u64) -> (ParamStore<f64>, ResidualBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = ResidualBlock::new(&mut Init::new(&mut store, &mut rng), "rb", channels, 3);
        (store, block)
    }

    #[test]
    fn residual_block_zero_params_is_identity() {
        let (mut store, block) = rb(4, 1);
        store.zero_all();
        let tape = Tape::inference();
        let x = random_tensor(&[1, 4, 8, 8], 3, 2.0);
        let y = block.forward(Ctx::new(&tape, &store), &tape.constant(x.clone())).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn residual_block_preserves_shape() {
        let (store, block) = rb(4, 2);
        let tape = Tape::inference();
        let x = tape.constant(random_tensor(&[1, 4, 8, 8], 4, 1.0));
        let y = block.forward(Ctx::new(&tape, &store), &x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 8, 8]);
    }

    #[test]
    fn residual_block_rejects_wrong_channels() {
        let (store, block) = rb(4, 2);
        let tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(matches!(block.forward(Ctx::new(&tape, &store), &x), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn residual_block_input_gradient_matches_finite_differences() {
        let (store, block) = rb(1, 5);
        let x = random_tensor(&[1, 1, 6, 6], 6, 1.0);
        let r = random_tensor(&[1, 1, 6, 6], 7, 1.0);
        let err = input_grad_error(&[x], |t, v| {
            let y = block.forward(Ctx::new(t, &store), &v[0])?;
            let rc = t.constant(r.clone());
            Ok(t.sum(&t.mul(&y, &rc)?))
        });
        assert!(err < 1e-4, "{err}");
        let x = random_tensor(&[1, 1, 6, 6], 8, 1.0);
        let perr = param_grad_error(&store, 64, 9, |t, s| {
            let y = block.forward(Ctx::new(t, s), &t.constant(x.clone()))?;
            let rc = t.constant(r.clone());
            Ok(t.sum(&t.mul(&y, &rc)?))
        });
        assert!(perr < 1e-4, "{perr}");
    }
}
