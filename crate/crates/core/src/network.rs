//! The full codec model: dual-frequency analysis and synthesis transforms,
//! per-branch hyperprior networks, entropy models, checkpointing and the
//! compress / decompress pipeline.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Wam, WINDOW_SIZE};
use crate::autograd::{Tape, Var};
use crate::entropy::bitstream::{Bitstream, Header, CUSTOM_LAMBDA, VERSION};
use crate::entropy::codec::{decode_factorized, decode_gaussian, encode_factorized, encode_gaussian};
use crate::entropy::context::ContextEntropy;
use crate::entropy::factorized::FactorizedPrior;
use crate::entropy::gaussian;
use crate::entropy::quantize::{add_uniform_noise, round_var};
use crate::entropy::bits;
use crate::error::{Error, Result};
use crate::frequency::{channel_split, FeaturePair, OctaveMerge, OctaveResidualBlock, OctaveSplit};
use crate::layers::{Conv2d, ConvTranspose2d, Ctx};
use crate::nonlinear::{NonlinearKind, Nonlinearity};
use crate::params::{Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Images are padded to a multiple of this before coding.
pub const PAD_MULTIPLE: usize = 64;
/// Total downsampling of the high-frequency latent.
pub const HIGH_STRIDE: usize = 16;
/// Bumped whenever the parameter layout changes.
pub const LAYOUT_VERSION: u32 = 1;
/// Standard rate points; the index is recorded in bitstream headers.
pub const LAMBDAS: [f64; 6] = [0.0018, 0.0035, 0.0067, 0.013, 0.025, 0.0483];
const STAGES: usize = 3;
/// Stages (0-based) followed by window attention.
const WAM_STAGES: [usize; 2] = [1, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Total channel width, split between the branches.
    pub n: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub w_size: usize,
    pub nonlinear: NonlinearKind,
    pub attention: bool,
    pub layout_version: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 192,
            alpha: 0.5,
            lambda: 0.013,
            w_size: WINDOW_SIZE,
            nonlinear: NonlinearKind::Ctmsrb,
            attention: true,
            layout_version: LAYOUT_VERSION,
        }
    }
}

impl ModelConfig {
    pub fn toy(n: usize) -> Self {
        ModelConfig { n, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 8 {
            return Err(Error::Config(format!("channel width N={} is below 8", self.n)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.w_size == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        if self.layout_version != LAYOUT_VERSION {
            return Err(Error::Config(format!(
                "layout version {} is not supported (expected {LAYOUT_VERSION})",
                self.layout_version
            )));
        }
        channel_split(self.n, self.alpha)?;
        Ok(())
    }

    pub fn branch_channels(&self) -> Result<(usize, usize)> {
        channel_split(self.n, self.alpha)
    }

    /// One-byte fingerprint of everything that shapes the parameters (not
    /// lambda, which only selects the training point).
    pub fn config_id(&self) -> u8 {
        let key = format!(
            "{}|{}|{}|{}|{}|{}",
            self.n,
            self.alpha_pct(),
            self.w_size,
            self.nonlinear.as_str(),
            self.attention,
            self.layout_version
        );
        let mut h: u32 = 0x811c_9dc5;
        for b in key.bytes() {
            h ^= u32::from(b);
            h = h.wrapping_mul(0x0100_0193);
        }
        (h ^ (h >> 8) ^ (h >> 16) ^ (h >> 24)) as u8
    }

    pub fn alpha_pct(&self) -> u8 {
        (self.alpha * 100.0).round().clamp(0.0, 255.0) as u8
    }

    pub fn lambda_index(&self) -> u8 {
        LAMBDAS
            .iter()
            .position(|&l| (l - self.lambda).abs() < 1e-12)
            .map_or(CUSTOM_LAMBDA, |i| i as u8)
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    itorb: OctaveResidualBlock,
    nl_high: Nonlinearity,
    nl_low: Nonlinearity,
    wam: Option<(Wam, Wam)>,
}

#[derive(Clone, Debug)]
struct HyperAnalysis {
    convs: [Conv2d; 3],
}

impl HyperAnalysis {
    fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, m: usize) -> Self {
        init.scope("analysis", |init| HyperAnalysis {
            convs: [
                Conv2d::new(init, "conv0", m, m, 5, 1, true),
                Conv2d::new(init, "conv1", m, m, 5, 2, true),
                Conv2d::new(init, "conv2", m, m, 5, 2, true),
            ],
        })
    }

    fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, y: &Var<T>) -> Result<Var<T>> {
        let mut x = self.convs[0].forward(cx, y)?;
        for c in &self.convs[1..] {
            x = c.forward(cx, &cx.lrelu(&x))?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct HyperSynthesis {
    up0: ConvTranspose2d,
    up1: ConvTranspose2d,
    out: Conv2d,
}

impl HyperSynthesis {
    fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, m: usize) -> Self {
        let mid = (3 * m).div_ceil(2);
        init.scope("synthesis", |init| HyperSynthesis {
            up0: ConvTranspose2d::up2(init, "up0", m, m, 5, true),
            up1: ConvTranspose2d::up2(init, "up1", m, mid, 5, true),
            out: Conv2d::new(init, "out", mid, 2 * m, 3, 1, true),
        })
    }

    /// Features at `(h, w)`, the spatial size of the latent being modelled.
    fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, z: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        let x = cx.lrelu(&self.up0.forward(cx, z)?);
        let x = cx.lrelu(&self.up1.forward(cx, &x)?);
        let x = self.out.forward(cx, &x)?;
        crop_var(cx.tape, &x, h, w)
    }
}

/// Per-branch hyperprior and entropy models.
#[derive(Clone, Debug)]
struct BranchEntropy {
    hyper_analysis: HyperAnalysis,
    hyper_synthesis: HyperSynthesis,
    prior: FactorizedPrior,
    context: ContextEntropy,
}

impl BranchEntropy {
    fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, m: usize) -> Self {
        init.scope(name, |init| BranchEntropy {
            hyper_analysis: HyperAnalysis::new(init, m),
            hyper_synthesis: HyperSynthesis::new(init, m),
            prior: FactorizedPrior::new(init, "prior", m),
            context: ContextEntropy::new(init, "context", m),
        })
    }
}

/// Spatial top-left crop of an NCHW value.
fn crop_var<T: Scalar>(tape: &Tape<T>, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    let (n, c, hh, ww) = x.dims4()?;
    if (hh, ww) == (h, w) {
        return Ok(x.clone());
    }
    if h > hh || w > ww {
        return Err(Error::Shape(format!("cannot crop {hh}x{ww} to {h}x{w}")));
    }
    let mut idx = Vec::with_capacity(n * c * h * w);
    for nc in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                idx.push((nc * hh + y) * ww + xx);
            }
        }
    }
    tape.gather(x, Rc::new(idx), &[n, c, h, w])
}

/// Replication-pad right/bottom so both dims are multiples of `multiple`.
/// Returns the padded tensor and the original `(h, w)`.
pub fn pad_image<T: Scalar>(x: &Tensor<T>, multiple: usize) -> Result<(Tensor<T>, (usize, usize))> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::Dimension("image has a zero dimension".into()));
    }
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let src = x.data();
    let out = Tensor::from_fn(&[n, c, ph, pw], |i| {
        let xx = (i % pw).min(w - 1);
        let y = ((i / pw) % ph).min(h - 1);
        let nc = i / (pw * ph);
        src[(nc * h + y) * w + xx]
    });
    Ok((out, (h, w)))
}

pub fn crop_image<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    Ok(crop_var(&tape, &tape.constant(x.clone()), h, w)?.value().clone())
}

/// Latent shapes `(y_high, y_low, z_high, z_low)` for a padded input.
pub fn latent_shapes(config: &ModelConfig, h: usize, w: usize) -> Result<[[usize; 4]; 4]> {
    let (c_h, c_l) = config.branch_channels()?;
    if !h.is_multiple_of(PAD_MULTIPLE) || !w.is_multiple_of(PAD_MULTIPLE) || h == 0 || w == 0 {
        return Err(Error::Dimension(format!("{h}x{w} is not padded to a multiple of {PAD_MULTIPLE}")));
    }
    let (yh, yw) = (h / HIGH_STRIDE, w / HIGH_STRIDE);
    let (lh, lw) = (yh / 2, yw / 2);
    let q = |d: usize| d.div_ceil(4);
    Ok([[1, c_h, yh, yw], [1, c_l, lh, lw], [1, c_h, q(yh), q(yw)], [1, c_l, q(lh), q(lw)]])
}

/// Values from a training-mode pass.
pub struct TrainOutput<T> {
    pub x_hat: Var<T>,
    /// Bits of `y_high, y_low, z_high, z_low`.
    pub bits: [Var<T>; 4],
    /// Pixels of the (padded) input batch, for normalising rates.
    pub pixels: usize,
}

/// Everything an eval-mode pass produces for a single image.
#[derive(Clone, Debug)]
pub struct EvalOutput<T> {
    /// Reconstruction cropped to the original size, unclamped.
    pub x_hat: Tensor<T>,
    pub y_hat: [Tensor<T>; 2],
    pub z_hat: [Tensor<T>; 2],
    /// Model estimate of `-sum log2 p` for `z_high, z_low, y_high, y_low`
    /// (stream order).
    pub est_bits: [f64; 4],
    pub original: (usize, usize),
}

/// Result of coding one image.
#[derive(Clone, Debug)]
pub struct Compressed<T> {
    pub bitstream: Bitstream,
    pub eval: EvalOutput<T>,
}

#[derive(Clone, Debug)]
pub struct OmrNet<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    split: OctaveSplit,
    enc: Vec<EncoderStage>,
    to_latent: (Conv2d, Conv2d),
    from_latent: (Conv2d, Conv2d),
    dec: Vec<EncoderStage>,
    merge: OctaveMerge,
    high: BranchEntropy,
    low: BranchEntropy,
}

impl<T: Scalar> OmrNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (c_h, c_l) = config.branch_channels()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let stage = |init: &mut Init<'_, T, ChaCha8Rng>, i: usize, decoder: bool| {
            init.scope(&format!("stage{i}"), |init| EncoderStage {
                itorb: OctaveResidualBlock::new(init, "itorb", c_h, c_l, decoder),
                nl_high: Nonlinearity::new(init, "nl_high", config.nonlinear, c_h, decoder),
                nl_low: Nonlinearity::new(init, "nl_low", config.nonlinear, c_l, decoder),
                wam: (config.attention && WAM_STAGES.contains(&i)).then(|| {
                    (Wam::new(init, "wam_high", c_h, config.w_size), Wam::new(init, "wam_low", c_l, config.w_size))
                }),
            })
        };
        let (split, enc, to_latent) = init.scope("analysis", |init| {
            let split = OctaveSplit::new(init, 3, c_h, c_l);
            let enc: Vec<_> = (0..STAGES).map(|i| stage(init, i, false)).collect();
            let to_latent = (
                Conv2d::new(init, "latent_high", c_h, c_h, 3, 1, true),
                Conv2d::new(init, "latent_low", c_l, c_l, 3, 1, true),
            );
            (split, enc, to_latent)
        });
        let (from_latent, dec, merge) = init.scope("synthesis", |init| {
            let from_latent = (
                Conv2d::new(init, "latent_high", c_h, c_h, 3, 1, true),
                Conv2d::new(init, "latent_low", c_l, c_l, 3, 1, true),
            );
            let dec: Vec<_> = (0..STAGES).map(|i| stage(init, i, true)).collect();
            let merge = OctaveMerge::new(init, c_h, c_l, 3);
            (from_latent, dec, merge)
        });
        let high = BranchEntropy::new(&mut init, "entropy_high", c_h);
        let low = BranchEntropy::new(&mut init, "entropy_low", c_l);
        Ok(OmrNet { config, store, split, enc, to_latent, from_latent, dec, merge, high, low })
    }

    fn cx<'a>(&'a self, tape: &'a Tape<T>) -> Ctx<'a, T> {
        Ctx::new(tape, &self.store)
    }

    fn stage_forward(cx: Ctx<'_, T>, s: &EncoderStage, pair: FeaturePair<T>, decoder: bool) -> Result<FeaturePair<T>> {
        let mut pair = if decoder { pair } else { s.itorb.forward(cx, &pair)? };
        let (mut h, mut l) = (pair.high.clone(), pair.low.clone());
        if decoder {
            if let Some((wh, wl)) = &s.wam {
                h = wh.forward(cx, &h)?;
                l = wl.forward(cx, &l)?;
            }
        }
        h = s.nl_high.forward(cx, &h)?;
        l = s.nl_low.forward(cx, &l)?;
        if !decoder {
            if let Some((wh, wl)) = &s.wam {
                h = wh.forward(cx, &h)?;
                l = wl.forward(cx, &l)?;
            }
        }
        pair = FeaturePair::new(h, l)?;
        if decoder {
            pair = s.itorb.forward(cx, &pair)?;
        }
        Ok(pair)
    }

    /// Image (padded, `[n, 3, H, W]`) to `(y_high, y_low)`.
    pub fn analysis(&self, tape: &Tape<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let cx = self.cx(tape);
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 image channels, got {c}")));
        }
        if h % PAD_MULTIPLE != 0 || w % PAD_MULTIPLE != 0 {
            return Err(Error::Dimension(format!("input {h}x{w} is not padded to a multiple of {PAD_MULTIPLE}")));
        }
        let mut pair = self.split.forward(cx, x)?;
        for s in &self.enc {
            pair = Self::stage_forward(cx, s, pair, false)?;
        }
        Ok((self.to_latent.0.forward(cx, &pair.high)?, self.to_latent.1.forward(cx, &pair.low)?))
    }

    pub fn synthesis(&self, tape: &Tape<T>, y_high: &Var<T>, y_low: &Var<T>) -> Result<Var<T>> {
        let cx = self.cx(tape);
        let (c_h, c_l) = self.config.branch_channels()?;
        let pair = FeaturePair::new(y_high.clone(), y_low.clone())?;
        pair.check_channels(c_h, c_l).map_err(|e| Error::Shape(e.to_string()))?;
        let mut pair = FeaturePair::new(
            self.from_latent.0.forward(cx, y_high)?,
            self.from_latent.1.forward(cx, y_low)?,
        )?;
        for s in self.dec.iter().rev() {
            pair = Self::stage_forward(cx, s, pair, true)?;
        }
        self.merge.forward(cx, &pair)
    }

    fn branches(&self) -> [&BranchEntropy; 2] {
        [&self.high, &self.low]
    }

    pub fn hyper_analysis(&self, tape: &Tape<T>, y: [&Var<T>; 2]) -> Result<[Var<T>; 2]> {
        let cx = self.cx(tape);
        let [a, b] = self.branches();
        Ok([a.hyper_analysis.forward(cx, y[0])?, b.hyper_analysis.forward(cx, y[1])?])
    }

    /// Entropy-parameter features (`2 * C` channels) at each latent's size.
    pub fn hyper_synthesis(&self, tape: &Tape<T>, z: [&Var<T>; 2], y_dims: [(usize, usize); 2]) -> Result<[Var<T>; 2]> {
        let cx = self.cx(tape);
        let [a, b] = self.branches();
        Ok([
            a.hyper_synthesis.forward(cx, z[0], y_dims[0].0, y_dims[0].1)?,
            b.hyper_synthesis.forward(cx, z[1], y_dims[1].0, y_dims[1].1)?,
        ])
    }

    /// Training pass on a padded batch: noisy latents feed both the rate
    /// and the reconstruction.
    pub fn forward_train<R: Rng>(&self, tape: &Tape<T>, x: &Tensor<T>, rng: &mut R) -> Result<TrainOutput<T>> {
        let (n, _, h, w) = x.dims4()?;
        let xv = tape.constant(x.clone());
        let (yh, yl) = self.analysis(tape, &xv)?;
        let [zh, zl] = self.hyper_analysis(tape, [&yh, &yl])?;
        let zh = add_uniform_noise(tape, &zh, rng)?;
        let zl = add_uniform_noise(tape, &zl, rng)?;
        let yh = add_uniform_noise(tape, &yh, rng)?;
        let yl = add_uniform_noise(tape, &yl, rng)?;
        let rates = self.rates(tape, [&yh, &yl], [&zh, &zl])?;
        let x_hat = self.synthesis(tape, &yh, &yl)?;
        Ok(TrainOutput { x_hat, bits: rates, pixels: n * h * w })
    }

    /// Bits of `y_high, y_low, z_high, z_low` under the full entropy model.
    fn rates(&self, tape: &Tape<T>, y: [&Var<T>; 2], z: [&Var<T>; 2]) -> Result<[Var<T>; 4]> {
        let dims = |v: &Var<T>| -> Result<(usize, usize)> {
            let (_, _, h, w) = v.dims4()?;
            Ok((h, w))
        };
        let feats = self.hyper_synthesis(tape, z, [dims(y[0])?, dims(y[1])?])?;
        let cx = self.cx(tape);
        let mut y_bits = Vec::new();
        let mut z_bits = Vec::new();
        for (i, b) in self.branches().into_iter().enumerate() {
            let (mu, sigma) = b.context.forward(cx, y[i], &feats[i])?;
            y_bits.push(bits(tape, &gaussian::likelihood(tape, y[i], &mu, &sigma)?));
            z_bits.push(bits(tape, &b.prior.likelihood(tape, &self.store, z[i])?));
        }
        let [yh, yl]: [Var<T>; 2] = y_bits.try_into().ok().unwrap();
        let [zh, zl]: [Var<T>; 2] = z_bits.try_into().ok().unwrap();
        Ok([yh, yl, zh, zl])
    }

    /// Deterministic eval-mode pass on one unpadded image `[1, 3, H, W]`:
    /// rounding quantisation, rate estimate and reconstruction exactly as the
    /// decoder will produce it.
    pub fn forward_eval(&self, image: &Tensor<T>) -> Result<EvalOutput<T>> {
        let (n, _, _, _) = image.dims4()?;
        if n != 1 {
            return Err(Error::Shape(format!("eval expects a single image, got batch {n}")));
        }
        let (padded, original) = pad_image(image, PAD_MULTIPLE)?;
        let tape = Tape::inference();
        let (yh, yl) = self.analysis(&tape, &tape.constant(padded))?;
        let [zh, zl] = self.hyper_analysis(&tape, [&yh, &yl])?;
        let (zh, zl) = (round_var(&tape, &zh), round_var(&tape, &zl));
        let (yh, yl) = (round_var(&tape, &yh), round_var(&tape, &yl));
        let r = self.rates(&tape, [&yh, &yl], [&zh, &zl])?;
        let est = |v: &Var<T>| v.value().data()[0].f64();
        let x_hat = self.synthesis(&tape, &yh, &yl)?;
        Ok(EvalOutput {
            x_hat: crop_image(x_hat.value(), original.0, original.1)?,
            y_hat: [yh.value().clone(), yl.value().clone()],
            z_hat: [zh.value().clone(), zl.value().clone()],
            est_bits: [est(&r[2]), est(&r[3]), est(&r[0]), est(&r[1])],
            original,
        })
    }

    pub fn header(&self, width: usize, height: usize) -> Result<Header> {
        let dim = |d: usize| u32::try_from(d).map_err(|_| Error::Input(format!("dimension {d} too large")));
        Ok(Header {
            version: VERSION,
            config_id: self.config.config_id(),
            lambda_index: self.config.lambda_index(),
            alpha_pct: self.config.alpha_pct(),
            width: dim(width)?,
            height: dim(height)?,
        })
    }

    /// Codes one image `[1, 3, H, W]` with values in `[0, 1]`.
    pub fn compress(&self, image: &Tensor<T>) -> Result<Compressed<T>> {
        let eval = self.forward_eval(image)?;
        let (h, w) = eval.original;
        let ph = h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
        let pw = w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
        let feats = self.hyper_features(&eval.z_hat, ph, pw)?;
        let [bh, bl] = self.branches();
        let streams = [
            encode_factorized(&eval.z_hat[0], &bh.prior, &self.store)?,
            encode_factorized(&eval.z_hat[1], &bl.prior, &self.store)?,
            encode_gaussian(&eval.y_hat[0], &feats[0], &bh.context, &self.store)?,
            encode_gaussian(&eval.y_hat[1], &feats[1], &bl.context, &self.store)?,
        ];
        Ok(Compressed { bitstream: Bitstream { header: self.header(w, h)?, streams }, eval })
    }

    fn hyper_features(&self, z_hat: &[Tensor<T>; 2], ph: usize, pw: usize) -> Result<[Tensor<T>; 2]> {
        let shapes = latent_shapes(&self.config, ph, pw)?;
        let tape = Tape::inference();
        let zh = tape.constant(z_hat[0].clone());
        let zl = tape.constant(z_hat[1].clone());
        let dims = [(shapes[0][2], shapes[0][3]), (shapes[1][2], shapes[1][3])];
        let [a, b] = self.hyper_synthesis(&tape, [&zh, &zl], dims)?;
        Ok([a.value().clone(), b.value().clone()])
    }

    /// Decoded latents and reconstruction (unclamped, cropped) of a
    /// bitstream.
    pub fn decompress(&self, bs: &Bitstream) -> Result<DecodedImage<T>> {
        let hd = &bs.header;
        if hd.version != VERSION {
            return Err(Error::Version { found: hd.version, expected: VERSION });
        }
        if hd.config_id != self.config.config_id() || hd.alpha_pct != self.config.alpha_pct() {
            return Err(Error::ConfigMismatch(format!(
                "stream was written by model {:#04x} (alpha {}%), this model is {:#04x} (alpha {}%)",
                hd.config_id,
                hd.alpha_pct,
                self.config.config_id(),
                self.config.alpha_pct()
            )));
        }
        let (h, w) = (hd.height as usize, hd.width as usize);
        if h == 0 || w == 0 {
            return Err(Error::Decode("zero image dimension in header".into()));
        }
        let ph = h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
        let pw = w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
        let shapes = latent_shapes(&self.config, ph, pw)?;
        let [bh, bl] = self.branches();
        let z_hat = [
            decode_factorized(&bs.streams[0], &bh.prior, &self.store, &shapes[2])?,
            decode_factorized(&bs.streams[1], &bl.prior, &self.store, &shapes[3])?,
        ];
        let feats = self.hyper_features(&z_hat, ph, pw)?;
        let y_hat = [
            decode_gaussian(&bs.streams[2], &feats[0], &bh.context, &self.store, &shapes[0])?,
            decode_gaussian(&bs.streams[3], &feats[1], &bl.context, &self.store, &shapes[1])?,
        ];
        let tape = Tape::inference();
        let x_hat = self.synthesis(&tape, &tape.constant(y_hat[0].clone()), &tape.constant(y_hat[1].clone()))?;
        Ok(DecodedImage { x_hat: crop_image(x_hat.value(), h, w)?, y_hat, z_hat })
    }

    /// Per-component parameter counts, keyed by top-level name.
    pub fn param_report(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (_, name, t) in self.store.iter() {
            let key = name.split('.').next().unwrap_or(name).to_string();
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, c)) => *c += t.len(),
                None => out.push((key, t.len())),
            }
        }
        out
    }

    /// Layer kinds of the analysis and synthesis transforms, for checking
    /// that they mirror each other.
    pub fn layer_inventory(&self) -> (Vec<String>, Vec<String>) {
        let kinds = |prefix: &str| -> Vec<String> {
            let mut v: Vec<String> = self
                .store
                .iter()
                .filter(|(_, n, _)| n.starts_with(prefix))
                .filter_map(|(_, n, t)| {
                    let rest = &n[prefix.len()..];
                    let tail = rest.rsplit('.').next().unwrap_or(rest);
                    (tail == "w" || tail == "gamma").then(|| {
                        let stage = rest.split('.').next().unwrap_or("");
                        let block = rest.split('.').nth(1).unwrap_or("");
                        let kind = if stage.starts_with("stage") { block.to_string() } else { "io".to_string() };
                        format!("{kind}:{}", t.shape().len())
                    })
                })
                .collect();
            v.sort();
            v
        };
        (kinds("analysis."), kinds("synthesis."))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        let cfg = serde_json::to_vec(&self.config)?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.store.len() as u32).to_le_bytes())?;
        for (_, name, t) in self.store.iter() {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[T::DTYPE, t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * T::BYTES);
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
        }
        let cfg_len = read_u32(r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg).map_err(|_| Error::Checkpoint("truncated config".into()))?;
        let config: ModelConfig = serde_json::from_slice(&cfg)?;
        let mut model = Self::new(config, 0)?;
        let count = read_u32(r)? as usize;
        if count != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {count} tensors, the configured model has {}",
                model.store.len()
            )));
        }
        for _ in 0..count {
            let mut nl = [0u8; 2];
            r.read_exact(&mut nl).map_err(|_| Error::Checkpoint("truncated tensor record".into()))?;
            let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
            r.read_exact(&mut name).map_err(|_| Error::Checkpoint("truncated tensor name".into()))?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut tag = [0u8; 2];
            r.read_exact(&mut tag).map_err(|_| Error::Checkpoint("truncated tensor header".into()))?;
            if tag[0] != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "{name} stored with dtype tag {}, loading as {}",
                    tag[0],
                    T::DTYPE
                )));
            }
            let mut shape = Vec::with_capacity(tag[1] as usize);
            for _ in 0..tag[1] {
                shape.push(read_u32(r)? as usize);
            }
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if model.store.get(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {shape:?}, model expects {:?}",
                    model.store.get(id).shape()
                )));
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * T::BYTES];
            r.read_exact(&mut buf).map_err(|_| Error::Checkpoint(format!("truncated data for {name}")))?;
            let data = buf.chunks_exact(T::BYTES).map(T::read_le).collect();
            model.store.set(id, Tensor::from_vec(&shape, data)?)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
        }
        Ok(model)
    }

    /// Parameter names with the trainable tensors of the context kernels
    /// whose non-causal taps must stay zero.
    pub fn validate(&self) -> Result<()> {
        for b in self.branches() {
            b.context.context.validate_mask(&self.store)?;
            b.prior.validate(&self.store)?;
        }
        for (_, name, t) in self.store.iter() {
            if !t.all_finite() {
                return Err(Error::Parameter(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Same architecture and weights at another precision.
    pub fn cast<U: Scalar>(&self) -> OmrNet<U> {
        OmrNet {
            config: self.config.clone(),
            store: self.store.cast(),
            split: self.split.clone(),
            enc: self.enc.clone(),
            to_latent: self.to_latent.clone(),
            from_latent: self.from_latent.clone(),
            dec: self.dec.clone(),
            merge: self.merge.clone(),
            high: self.high.clone(),
            low: self.low.clone(),
        }
    }

    /// Context models of the two branches, for causality probes.
    pub fn context_models(&self) -> [&ContextEntropy; 2] {
        [&self.high.context, &self.low.context]
    }
}

#[derive(Clone, Debug)]
pub struct DecodedImage<T> {
    pub x_hat: Tensor<T>,
    pub y_hat: [Tensor<T>; 2],
    pub z_hat: [Tensor<T>; 2],
}

const CKPT_MAGIC: &[u8; 8] = b"OMRCKPT1";

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn tiny(nonlinear: NonlinearKind, attention: bool) -> ModelConfig {
        ModelConfig { n: 8, nonlinear, attention, ..Default::default() }
    }

    #[test]
    fn pad_and_crop() {
        let x = random_tensor(&[1, 3, 70, 65], 1, 1.0);
        let (p, (h, w)) = pad_image(&x, 64).unwrap();
        assert_eq!(p.shape(), &[1, 3, 128, 128]);
        assert_eq!(p.at4(0, 2, 100, 127), x.at4(0, 2, 69, 64));
        assert_eq!(p.at4(0, 1, 3, 90), x.at4(0, 1, 3, 64));
        assert_eq!(crop_image(&p, h, w).unwrap(), x);
        let x = random_tensor(&[1, 3, 64, 128], 2, 1.0);
        assert_eq!(pad_image(&x, 64).unwrap().0, x);
    }

    #[test]
    fn latent_shape_table() {
        let cfg = ModelConfig::default();
        let s = latent_shapes(&cfg, 256, 256).unwrap();
        assert_eq!(s[0], [1, 96, 16, 16]);
        assert_eq!(s[1], [1, 96, 8, 8]);
        assert_eq!(s[2], [1, 96, 4, 4]);
        let s = latent_shapes(&cfg, 256, 512).unwrap();
        assert_eq!(s[0], [1, 96, 16, 32]);
        assert_eq!(s[1], [1, 96, 8, 16]);
        assert!(latent_shapes(&cfg, 250, 256).is_err());
    }

    #[test]
    fn transforms_match_shape_table() {
        let cfg = tiny(NonlinearKind::Ctmsrb, true);
        let model = OmrNet::<f32>::new(cfg.clone(), 1).unwrap();
        let tape = Tape::inference();
        let x = tape.constant(random_tensor(&[1, 3, 64, 128], 3, 1.0).cast());
        let (yh, yl) = model.analysis(&tape, &x).unwrap();
        let shapes = latent_shapes(&cfg, 64, 128).unwrap();
        assert_eq!(yh.shape(), &shapes[0]);
        assert_eq!(yl.shape(), &shapes[1]);
        let [zh, zl] = model.hyper_analysis(&tape, [&yh, &yl]).unwrap();
        assert_eq!(zh.shape(), &shapes[2]);
        assert_eq!(zl.shape(), &shapes[3]);
        let f = model.hyper_synthesis(&tape, [&zh, &zl], [(4, 8), (2, 4)]).unwrap();
        assert_eq!(f[0].shape(), &[1, 8, 4, 8]);
        assert_eq!(f[1].shape(), &[1, 8, 2, 4]);
        assert_eq!(model.synthesis(&tape, &yh, &yl).unwrap().shape(), &[1, 3, 64, 128]);
        assert!(matches!(
            model.analysis(&tape, &tape.constant(Tensor::zeros(&[1, 3, 60, 64]))),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_model_synthesises_zero_image() {
        let mut model = OmrNet::<f64>::new(tiny(NonlinearKind::Gdn, false), 2).unwrap();
        // GDN stays well defined with beta at its floor
        model.store.zero_all();
        let tape = Tape::inference();
        let yh = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let yl = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let x = model.synthesis(&tape, &yh, &yl).unwrap();
        assert!(x.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = OmrNet::<f32>::new(tiny(NonlinearKind::Msrb, true), 5).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back = OmrNet::<f32>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config, model.config);
        for ((_, n1, a), (_, n2, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        assert!(OmrNet::<f64>::read_from(&mut buf.as_slice()).is_err());
        assert!(OmrNet::<f32>::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn compress_round_trip_and_header_checks() {
        let model = OmrNet::<f32>::new(tiny(NonlinearKind::Ctmsrb, true), 7).unwrap();
        let img = random_tensor(&[1, 3, 50, 70], 8, 0.5).map(|v| v + 0.5).cast::<f32>();
        let c = model.compress(&img).unwrap();
        assert_eq!((c.bitstream.header.width, c.bitstream.header.height), (70, 50));
        let bytes = c.bitstream.to_bytes();
        let d = model.decompress(&Bitstream::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(d.y_hat[0], c.eval.y_hat[0]);
        assert_eq!(d.y_hat[1], c.eval.y_hat[1]);
        assert_eq!(d.z_hat[0], c.eval.z_hat[0]);
        assert_eq!(d.z_hat[1], c.eval.z_hat[1]);
        assert_eq!(d.x_hat, c.eval.x_hat);
        assert_eq!(d.x_hat.shape(), &[1, 3, 50, 70]);

        let other = OmrNet::<f32>::new(tiny(NonlinearKind::Gdn, true), 7).unwrap();
        assert!(matches!(other.decompress(&c.bitstream), Err(Error::ConfigMismatch(_))));
        let again = model.compress(&img).unwrap();
        assert_eq!(again.bitstream.to_bytes(), bytes);
    }

    #[test]
    fn analysis_and_synthesis_mirror() {
        for kind in [NonlinearKind::Gdn, NonlinearKind::Ctmsrb] {
            let model = OmrNet::<f32>::new(tiny(kind, true), 1).unwrap();
            let (a, s) = model.layer_inventory();
            assert_eq!(a.len(), s.len(), "{kind:?}");
        }
    }

    #[test]
    fn config_ids_separate_architectures() {
        let a = ModelConfig::default();
        let b = ModelConfig { nonlinear: NonlinearKind::Gdn, ..a.clone() };
        let c = ModelConfig { lambda: 0.0483, ..a.clone() };
        assert_ne!(a.config_id(), b.config_id());
        assert_eq!(a.config_id(), c.config_id());
        assert_eq!(a.lambda_index(), 3);
        assert_eq!(ModelConfig { lambda: 0.5, ..a }.lambda_index(), CUSTOM_LAMBDA);
    }
}
