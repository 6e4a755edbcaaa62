//! Nonlinear transforms applied after every octave stage: GDN/IGDN for the
//! baseline, the single-stage multi-scale residual blocks (MSRB, IMSRB) and
//! the two-stage TMSRB with its cascaded form CTMSRB.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Ctx, ResidualBlock};
use crate::params::{Init, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound on GDN's `beta`, enforced by `beta = beta_raw^2 + BETA_MIN`.
pub const GDN_BETA_MIN: f64 = 1e-6;

/// Generalized divisive normalization,
/// `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`; the inverse form
/// multiplies instead.
#[derive(Clone, Debug)]
pub struct Gdn {
    pub beta: ParamId,
    pub gamma: ParamId,
    pub channels: usize,
    pub inverse: bool,
}

impl Gdn {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize, inverse: bool) -> Self {
        init.scope(name, |init| {
            let beta = init.constant("beta", &[channels], 1.0);
            let g = Tensor::from_fn(&[channels, channels, 1, 1], |i| {
                if i / channels == i % channels {
                    T::c(0.1f64.sqrt())
                } else {
                    T::c(0.01)
                }
            });
            let gamma = init.tensor("gamma", g);
            Gdn { beta, gamma, channels, inverse }
        })
    }

    /// Store raw parameters that reproduce the given effective `beta` and
    /// `gamma` (non-negative) exactly up to rounding.
    pub fn set_effective<T: Scalar>(
        &self,
        store: &mut crate::params::ParamStore<T>,
        beta: &[f64],
        gamma: &[f64],
    ) -> Result<()> {
        if beta.iter().any(|&b| b < GDN_BETA_MIN) || gamma.iter().any(|&g| g < 0.0) {
            return Err(Error::Parameter("beta must be >= beta_min and gamma >= 0".into()));
        }
        let c = self.channels;
        store.set(self.beta, Tensor::from_fn(&[c], |i| T::c((beta[i] - GDN_BETA_MIN).sqrt())))?;
        store.set(self.gamma, Tensor::from_fn(&[c, c, 1, 1], |i| T::c(gamma[i].sqrt())))
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let t = cx.tape;
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("GDN over {} channels applied to {}", self.channels, c)));
        }
        let beta = t.add_scalar(&t.square(&cx.p(self.beta)), GDN_BETA_MIN);
        let gamma = t.square(&cx.p(self.gamma));
        let norm = t.conv2d(&t.square(x), &gamma, Some(&beta), crate::autograd::ConvGeom::new(1, 0))?;
        let root = t.sqrt(&norm);
        if self.inverse {
            t.mul(x, &root)
        } else {
            t.div(x, &root)
        }
    }
}

/// Direct GDN evaluation from effective parameters (`gamma` row-major
/// `[c, c]`). Used as an oracle and for parameter validation.
pub fn gdn_apply<T: Scalar>(x: &Tensor<T>, beta: &[f64], gamma: &[f64], inverse: bool) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if beta.len() != c || gamma.len() != c * c {
        return Err(Error::Shape(format!("GDN parameters for {} channels, input has {c}", beta.len())));
    }
    if let Some(b) = beta.iter().find(|&&b| b.is_nan() || b <= 0.0) {
        return Err(Error::Parameter(format!("GDN beta must be positive, got {b}")));
    }
    let mut out = x.clone();
    let hw = h * w;
    for b in 0..n {
        for p in 0..hw {
            for i in 0..c {
                let mut s = beta[i];
                for j in 0..c {
                    let v = x.data()[(b * c + j) * hw + p].f64();
                    s += gamma[i * c + j] * v * v;
                }
                let idx = (b * c + i) * hw + p;
                let xi = x.data()[idx].f64();
                out.data_mut()[idx] = T::c(if inverse { xi * s.sqrt() } else { xi / s.sqrt() });
            }
        }
    }
    Ok(out)
}

fn check_channels<T: Scalar>(x: &Var<T>, c: usize, what: &str) -> Result<()> {
    let got = x.dims4()?.1;
    if got != c {
        return Err(Error::Shape(format!("{what} over {c} channels applied to {got}")));
    }
    Ok(())
}

/// Multi-scale residual block: one interaction stage between 3x3 and 5x5
/// branches with rectifiers, pointwise fusion and an identity shortcut.
#[derive(Clone, Debug)]
pub struct Msrb {
    pub s1: Conv2d,
    pub p1: Conv2d,
    pub s2: Conv2d,
    pub p2: Conv2d,
    pub fuse: Conv2d,
    pub channels: usize,
}

impl Msrb {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, c: usize) -> Self {
        init.scope(name, |init| Msrb {
            s1: Conv2d::new(init, "s1", c, c, 3, 1, true),
            p1: Conv2d::new(init, "p1", c, c, 5, 1, true),
            s2: Conv2d::new(init, "s2", 2 * c, 2 * c, 3, 1, true),
            p2: Conv2d::new(init, "p2", 2 * c, 2 * c, 5, 1, true),
            fuse: Conv2d::with_gain(init, "fuse", 4 * c, c, 1, 1, true, 0.5),
            channels: c,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels(x, self.channels, "MSRB")?;
        let t = cx.tape;
        let s1 = t.relu(&self.s1.forward(cx, x)?);
        let p1 = t.relu(&self.p1.forward(cx, x)?);
        let m = t.concat(&[&s1, &p1])?;
        let s2 = t.relu(&self.s2.forward(cx, &m)?);
        let p2 = t.relu(&self.p2.forward(cx, &m)?);
        let m2 = t.concat(&[&s2, &p2])?;
        t.add(x, &self.fuse.forward(cx, &m2)?)
    }
}

/// MSRB with every plain convolution replaced by a residual block.
#[derive(Clone, Debug)]
pub struct Imsrb {
    pub s1: ResidualBlock,
    pub p1: ResidualBlock,
    pub s2: ResidualBlock,
    pub p2: ResidualBlock,
    pub fuse: Conv2d,
    pub channels: usize,
}

impl Imsrb {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, c: usize) -> Self {
        init.scope(name, |init| Imsrb {
            s1: ResidualBlock::new(init, "s1", c, 3),
            p1: ResidualBlock::new(init, "p1", c, 5),
            s2: ResidualBlock::new(init, "s2", 2 * c, 3),
            p2: ResidualBlock::new(init, "p2", 2 * c, 5),
            fuse: Conv2d::with_gain(init, "fuse", 4 * c, c, 1, 1, true, 0.5),
            channels: c,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels(x, self.channels, "IMSRB")?;
        let t = cx.tape;
        let s1 = self.s1.forward(cx, x)?;
        let p1 = self.p1.forward(cx, x)?;
        let m = t.concat(&[&s1, &p1])?;
        let s2 = self.s2.forward(cx, &m)?;
        let p2 = self.p2.forward(cx, &m)?;
        let m2 = t.concat(&[&s2, &p2])?;
        t.add(x, &self.fuse.forward(cx, &m2)?)
    }
}

/// One branch of the second TMSRB stage: a residual block whose shortcut is
/// the branch's own first-stage output and whose body reads the
/// concatenation of both branches.
#[derive(Clone, Debug)]
struct Refine {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Two-stage multi-scale residual block.
///
/// Stage 1: 3x3 and 5x5 branches (leaky rectifier), concatenated. Stage 2:
/// each branch refined by a residual block reading the concatenation, then
/// concatenated again. A 1x1 convolution fuses the result, added to the
/// input.
#[derive(Clone, Debug)]
pub struct Tmsrb {
    pub s1: Conv2d,
    pub p1: Conv2d,
    s_refine: Refine,
    p_refine: Refine,
    pub fuse: Conv2d,
    pub channels: usize,
}

impl Tmsrb {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, c: usize) -> Self {
        init.scope(name, |init| {
            let s1 = Conv2d::new(init, "s1", c, c, 3, 1, true);
            let p1 = Conv2d::new(init, "p1", c, c, 5, 1, true);
            let s_refine = init.scope("s2", |init| Refine {
                conv1: Conv2d::new(init, "conv1", 2 * c, c, 3, 1, true),
                conv2: Conv2d::with_gain(init, "conv2", c, c, 3, 1, true, 0.5),
            });
            let p_refine = init.scope("p2", |init| Refine {
                conv1: Conv2d::new(init, "conv1", 2 * c, c, 5, 1, true),
                conv2: Conv2d::with_gain(init, "conv2", c, c, 5, 1, true, 0.5),
            });
            let fuse = Conv2d::with_gain(init, "fuse", 2 * c, c, 1, 1, true, 0.5);
            Tmsrb { s1, p1, s_refine, p_refine, fuse, channels: c }
        })
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels(x, self.channels, "TMSRB")?;
        let t = cx.tape;
        let s1 = cx.lrelu(&self.s1.forward(cx, x)?);
        let p1 = cx.lrelu(&self.p1.forward(cx, x)?);
        let m1 = t.concat(&[&s1, &p1])?;
        let refine = |r: &Refine, short: &Var<T>| -> Result<Var<T>> {
            let h = cx.lrelu(&r.conv1.forward(cx, &m1)?);
            t.add(short, &r.conv2.forward(cx, &h)?)
        };
        let s2 = refine(&self.s_refine, &s1)?;
        let p2 = refine(&self.p_refine, &p1)?;
        let m2 = t.concat(&[&s2, &p2])?;
        t.add(x, &self.fuse.forward(cx, &m2)?)
    }
}

/// Two TMSRBs in cascade; each carries its own identity shortcut.
#[derive(Clone, Debug)]
pub struct Ctmsrb {
    pub first: Tmsrb,
    pub second: Tmsrb,
}

impl Ctmsrb {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, c: usize) -> Self {
        init.scope(name, |init| Ctmsrb {
            first: Tmsrb::new(init, "tmsrb1", c),
            second: Tmsrb::new(init, "tmsrb2", c),
        })
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.first.forward(cx, x)?;
        self.second.forward(cx, &h)
    }
}

/// Which nonlinearity follows each octave stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonlinearKind {
    Gdn,
    Msrb,
    Imsrb,
    Ctmsrb,
}

impl NonlinearKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NonlinearKind::Gdn => "gdn",
            NonlinearKind::Msrb => "msrb",
            NonlinearKind::Imsrb => "imsrb",
            NonlinearKind::Ctmsrb => "ctmsrb",
        }
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Nonlinearity {
    Gdn(Gdn),
    Msrb(Msrb),
    Imsrb(Imsrb),
    Ctmsrb(Ctmsrb),
}

impl Nonlinearity {
    /// `decoder` selects IGDN for the GDN variant.
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        kind: NonlinearKind,
        c: usize,
        decoder: bool,
    ) -> Self {
        match kind {
            NonlinearKind::Gdn => Nonlinearity::Gdn(Gdn::new(init, name, c, decoder)),
            NonlinearKind::Msrb => Nonlinearity::Msrb(Msrb::new(init, name, c)),
            NonlinearKind::Imsrb => Nonlinearity::Imsrb(Imsrb::new(init, name, c)),
            NonlinearKind::Ctmsrb => Nonlinearity::Ctmsrb(Ctmsrb::new(init, name, c)),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Nonlinearity::Gdn(b) => b.forward(cx, x),
            Nonlinearity::Msrb(b) => b.forward(cx, x),
            Nonlinearity::Imsrb(b) => b.forward(cx, x),
            Nonlinearity::Ctmsrb(b) => b.forward(cx, x),
        }
    }
}
