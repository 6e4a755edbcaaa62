//! Octave (dual-frequency) analysis and synthesis transforms.
//!
//! Features travel as a [`FeaturePair`]: a high-frequency map and a
//! low-frequency map at half its resolution. The entry split downsamples the
//! image by 2 and produces the pair; every [`OctaveResidualBlock`] then
//! exchanges information between the two branches through residual blocks
//! and halves (or, transposed, doubles) both resolutions.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvTranspose2d, Ctx, Resample, ResidualBlock};
use crate::params::Init;
use crate::scalar::Scalar;

/// Split `channels` into `(C_H, C_L)` with `C_H = round((1 - alpha) C)`.
pub fn channel_split(channels: usize, alpha: f64) -> Result<(usize, usize)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("octave ratio alpha must lie in (0, 1), got {alpha}")));
    }
    let c_h = ((1.0 - alpha) * channels as f64).round() as usize;
    let c_l = channels - c_h;
    if c_h == 0 || c_l == 0 {
        return Err(Error::Config(format!("alpha={alpha} leaves an empty branch for C={channels}")));
    }
    Ok((c_h, c_l))
}

/// High/low frequency feature maps (`[n, C_H, H, W]` and `[n, C_L, H/2, W/2]`).
#[derive(Clone, Debug)]
pub struct FeaturePair<T> {
    pub high: Var<T>,
    pub low: Var<T>,
}

impl<T: Scalar> FeaturePair<T> {
    pub fn new(high: Var<T>, low: Var<T>) -> Result<Self> {
        let p = FeaturePair { high, low };
        p.validate()?;
        Ok(p)
    }

    /// Low spatial dims must be exactly half the (even) high dims and the
    /// batch sizes must agree.
    pub fn validate(&self) -> Result<()> {
        let (nh, _, hh, wh) = self.high.dims4()?;
        let (nl, _, hl, wl) = self.low.dims4()?;
        if nh != nl {
            return Err(Error::Structure(format!("batch {nh} vs {nl}")));
        }
        if hh % 2 != 0 || wh % 2 != 0 {
            return Err(Error::Dimension(format!("high-frequency dims {hh}x{wh} must be even")));
        }
        if hl * 2 != hh || wl * 2 != wh {
            return Err(Error::Structure(format!(
                "low-frequency dims {hl}x{wl} are not half of high-frequency dims {hh}x{wh}"
            )));
        }
        Ok(())
    }

    pub fn check_channels(&self, c_h: usize, c_l: usize) -> Result<()> {
        let ch = self.high.shape()[1];
        let cl = self.low.shape()[1];
        if ch != c_h || cl != c_l {
            return Err(Error::Structure(format!("channels ({ch}, {cl}), expected ({c_h}, {c_l})")));
        }
        Ok(())
    }

    pub fn channels(&self) -> (usize, usize) {
        (self.high.shape()[1], self.low.shape()[1])
    }
}

/// Entry layer: stride-2 convolution to the high branch, then a further
/// stride-2 convolution of the high branch to the low branch.
#[derive(Clone, Debug)]
pub struct OctaveSplit {
    pub to_high: Conv2d,
    pub to_low: Conv2d,
    pub c_h: usize,
    pub c_l: usize,
}

impl OctaveSplit {
    /// Total spatial stride of the entry layer relative to the input image.
    pub const ENTRY_STRIDE: usize = 4;

    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, c_in: usize, c_h: usize, c_l: usize) -> Self {
        init.scope("split", |init| OctaveSplit {
            to_high: Conv2d::new(init, "to_high", c_in, c_h, 3, 2, true),
            to_low: Conv2d::new(init, "to_low", c_h, c_l, 3, 2, true),
            c_h,
            c_l,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, x: &Var<T>) -> Result<FeaturePair<T>> {
        let (_, _, h, w) = x.dims4()?;
        if h % Self::ENTRY_STRIDE != 0 || w % Self::ENTRY_STRIDE != 0 {
            return Err(Error::Dimension(format!(
                "input {h}x{w} must be divisible by {}",
                Self::ENTRY_STRIDE
            )));
        }
        let high = self.to_high.forward(cx, x)?;
        let low = self.to_low.forward(cx, &high)?;
        FeaturePair::new(high, low)
    }
}

/// Final decoder layer: upsample the low branch into the high branch, then a
/// transposed convolution to image channels at twice the high resolution.
#[derive(Clone, Debug)]
pub struct OctaveMerge {
    pub low_to_high: ConvTranspose2d,
    pub to_image: ConvTranspose2d,
}

impl OctaveMerge {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, c_h: usize, c_l: usize, c_out: usize) -> Self {
        init.scope("merge", |init| OctaveMerge {
            low_to_high: ConvTranspose2d::up2(init, "low_to_high", c_l, c_h, 3, true),
            to_image: ConvTranspose2d::up2(init, "to_image", c_h, c_out, 3, true),
        })
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, pair: &FeaturePair<T>) -> Result<Var<T>> {
        pair.validate()?;
        let up = self.low_to_high.forward(cx, &pair.low)?;
        let fused = cx.tape.add(&pair.high, &up)?;
        self.to_image.forward(cx, &cx.lrelu(&fused))
    }
}

/// Two-stage octave residual block.
///
/// ```text
/// Y_p^H = f(X^H) + up(X^L)          Y_p^L = f(X^L) + down(X^H)
/// Y^H   = resample(Y_p^H) + skip(X^H)
/// Y^L   = resample(Y_p^L) + skip(X^L)
/// ```
///
/// `f` is a residual block, the cross-frequency exchange uses stride-2
/// (transposed) 3x3 convolutions, the stage resampling is a stride-2 3x3
/// convolution (transposed in the decoder) and the skip is a bias-free 2x2
/// stride-2 (transposed) convolution.
#[derive(Clone, Debug)]
pub struct OctaveResidualBlock {
    pub rb_high: ResidualBlock,
    pub rb_low: ResidualBlock,
    pub low_to_high: ConvTranspose2d,
    pub high_to_low: Conv2d,
    pub resample_high: Resample,
    pub resample_low: Resample,
    pub skip_high: Resample,
    pub skip_low: Resample,
    pub c_h: usize,
    pub c_l: usize,
    pub transposed: bool,
}

impl OctaveResidualBlock {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        c_h: usize,
        c_l: usize,
        transposed: bool,
    ) -> Self {
        init.scope(name, |init| OctaveResidualBlock {
            rb_high: ResidualBlock::new(init, "rb_high", c_h, 3),
            rb_low: ResidualBlock::new(init, "rb_low", c_l, 3),
            // gains keep the summed paths near unit variance at init
            low_to_high: ConvTranspose2d::up2_with_gain(init, "low_to_high", c_l, c_h, 3, true, 0.5),
            high_to_low: Conv2d::with_gain(init, "high_to_low", c_h, c_l, 3, 2, true, 0.5),
            resample_high: Resample::with_gain(init, "resample_high", c_h, c_h, 3, transposed, true, 0.6),
            resample_low: Resample::with_gain(init, "resample_low", c_l, c_l, 3, transposed, true, 0.6),
            skip_high: Resample::with_gain(init, "skip_high", c_h, c_h, 2, transposed, false, 0.7),
            skip_low: Resample::with_gain(init, "skip_low", c_l, c_l, 2, transposed, false, 0.7),
            c_h,
            c_l,
            transposed,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, x: &FeaturePair<T>) -> Result<FeaturePair<T>> {
        x.validate()?;
        x.check_channels(self.c_h, self.c_l)?;
        if !self.transposed {
            let (_, _, hl, wl) = x.low.dims4()?;
            if hl % 2 != 0 || wl % 2 != 0 {
                return Err(Error::Dimension(format!("low-frequency dims {hl}x{wl} must be even")));
            }
        }
        let t = cx.tape;
        let hh = self.rb_high.forward(cx, &x.high)?;
        let lh = self.low_to_high.forward(cx, &x.low)?;
        let yp_h = t.add(&hh, &lh)?;
        let ll = self.rb_low.forward(cx, &x.low)?;
        let hl = self.high_to_low.forward(cx, &x.high)?;
        let yp_l = t.add(&ll, &hl)?;
        let y_h = t.add(&self.resample_high.forward(cx, &yp_h)?, &self.skip_high.forward(cx, &x.high)?)?;
        let y_l = t.add(&self.resample_low.forward(cx, &yp_l)?, &self.skip_low.forward(cx, &x.low)?)?;
        FeaturePair::new(y_h, y_l)
    }
}
