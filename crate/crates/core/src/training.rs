//! Rate-distortion training: loss, patch sampling, Adam with global
//! gradient clipping, learning-rate schedule and the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::{ModelConfig, OmrNet};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub patch: usize,
    pub epochs: usize,
    /// Optimisation steps per epoch; `None` means one pass over the images.
    pub steps_per_epoch: Option<usize>,
    /// Hard cap on total steps (desk-scale runs).
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_after_drop: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 8,
            patch: 256,
            epochs: 400,
            steps_per_epoch: None,
            max_steps: None,
            lr: 1e-4,
            lr_drop_epoch: 300,
            lr_after_drop: 1e-5,
            clip_norm: 1.0,
            seed: 0,
            log_interval: 50,
        }
    }
}

impl TrainConfig {
    /// Small model on small patches for a CPU run of `steps` steps. The
    /// run is split into ten epochs with the learning rate dropped tenfold
    /// for the last two.
    pub fn desk_scale(steps: usize) -> Self {
        TrainConfig {
            model: ModelConfig { n: 32, lambda: 0.0483, ..ModelConfig::default() },
            batch_size: 4,
            patch: 64,
            epochs: 10,
            steps_per_epoch: Some(steps.div_ceil(10)),
            max_steps: Some(steps),
            lr: 1e-3,
            lr_drop_epoch: 8,
            lr_after_drop: 1e-4,
            log_interval: 50,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(crate::network::PAD_MULTIPLE) {
            return Err(Error::Config(format!(
                "patch size {} must be a positive multiple of {}",
                self.patch,
                crate::network::PAD_MULTIPLE
            )));
        }
        if !(self.lr > 0.0 && self.lr_after_drop > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("learning rates and clip norm must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr_after_drop
        } else {
            self.lr
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Scalar form of the objective: `lambda * 255^2 * mse + bpp`.
pub fn rd_loss_value(lambda: f64, mse: f64, bpp: f64) -> f64 {
    lambda * 255.0 * 255.0 * mse + bpp
}

/// Loss terms as tape values.
pub struct RdLoss<T> {
    pub loss: Var<T>,
    pub mse: Var<T>,
    /// Rate of `y_high, y_low, z_high, z_low` in bits per pixel.
    pub bpp: [Var<T>; 4],
}

/// Objective on `[0, 1]` pixels with rates in bits per (padded) pixel.
pub fn rd_loss<T: Scalar>(
    tape: &Tape<T>,
    x: &Var<T>,
    x_hat: &Var<T>,
    bits: &[Var<T>; 4],
    pixels: usize,
    lambda: f64,
) -> Result<RdLoss<T>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape(format!("image {:?} vs reconstruction {:?}", x.shape(), x_hat.shape())));
    }
    let n = x.value().len() as f64;
    let mse = tape.scale(&tape.sum(&tape.square(&tape.sub(x_hat, x)?)), 1.0 / n);
    let bpp = bits.clone().map(|b| tape.scale(&b, 1.0 / pixels as f64));
    let mut loss = tape.scale(&mse, lambda * 255.0 * 255.0);
    for b in &bpp {
        loss = tape.add(&loss, b)?;
    }
    Ok(RdLoss { loss, mse, bpp })
}

/// Uniformly placed `size x size` crop of a `[1, C, H, W]` image; `None`
/// when the image is too small.
pub fn crop_patch<T: Scalar, R: Rng + ?Sized>(image: &Tensor<T>, size: usize, rng: &mut R) -> Result<Option<Tensor<T>>> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 {
        return Err(Error::Shape(format!("expected a single image, got batch {n}")));
    }
    if h < size || w < size {
        return Ok(None);
    }
    let oy = rng.random_range(0..=h - size);
    let ox = rng.random_range(0..=w - size);
    let src = image.data();
    Ok(Some(Tensor::from_fn(&[1, c, size, size], |i| {
        let x = i % size;
        let y = (i / size) % size;
        let ch = i / (size * size);
        src[(ch * h + oy + y) * w + ox + x]
    })))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::c(lr * c2.sqrt() / c1);
        let eps = T::c(self.eps * c2.sqrt());
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for (((p, g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * *g;
                *v = b2 * *v + (T::one() - b2) * *g * *g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Scalar>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads.iter().flatten().map(|g| g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    /// Estimated rate per stream (`y_high, y_low, z_high, z_low`) and total.
    pub bpp: [f64; 4],
    pub bpp_total: f64,
    pub psnr: f64,
    pub grad_norm: f64,
}

/// Forward, backward, clip and update on one batch `[n, 3, P, P]`.
pub fn train_step<T: Scalar, R: Rng>(
    model: &mut OmrNet<T>,
    adam: &mut Adam<T>,
    batch: &Tensor<T>,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StepStats> {
    let tape = Tape::new();
    let out = model.forward_train(&tape, batch, rng)?;
    let x = tape.constant(batch.clone());
    let l = rd_loss(&tape, &x, &out.x_hat, &out.bits, out.pixels, model.config.lambda)?;
    let val = |v: &Var<T>| v.value().data()[0].f64();
    let loss = val(&l.loss);
    let mse = val(&l.mse);
    let bpp = [val(&l.bpp[0]), val(&l.bpp[1]), val(&l.bpp[2]), val(&l.bpp[3])];
    if !loss.is_finite() {
        return Err(non_finite(model, &format!("loss is {loss} (mse {mse}, bpp {bpp:?})")));
    }
    let mut grads = tape.backward(&l.loss)?.params(&model.store);
    drop(out);
    drop(l);
    drop(tape);
    for (id, g) in model.store.ids().zip(&grads) {
        if let Some(g) = g {
            if !g.all_finite() {
                return Err(non_finite(model, &format!("gradient of {} is not finite", model.store.name(id))));
            }
        }
    }
    let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
    adam.step(&mut model.store, &grads, lr);
    Ok(StepStats {
        step: adam.steps(),
        epoch: 0,
        lr,
        loss,
        mse,
        bpp,
        bpp_total: bpp.iter().sum(),
        psnr: crate::evaluation::psnr_from_mse(mse, 1.0),
        grad_norm: norm,
    })
}

fn non_finite<T: Scalar>(model: &OmrNet<T>, what: &str) -> Error {
    let mut dump = String::new();
    for (_, name, t) in model.store.iter() {
        if !t.all_finite() {
            dump.push_str(&format!("\n  non-finite parameter {name}"));
        }
    }
    let worst = model
        .store
        .iter()
        .map(|(_, n, t)| (n.to_string(), t.max_abs().f64()))
        .fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    Error::NonFinite(format!("{what}; largest parameter magnitude {} in {}{dump}", worst.1, worst.0))
}

/// Stacks random patches of the given images into one batch.
pub fn sample_batch<T: Scalar, R: Rng>(images: &[Tensor<T>], cfg: &TrainConfig, rng: &mut R) -> Result<Tensor<T>> {
    let mut items = Vec::with_capacity(cfg.batch_size);
    let mut attempts = 0;
    while items.len() < cfg.batch_size {
        attempts += 1;
        if attempts > 100 * cfg.batch_size {
            return Err(Error::Input(format!("no training image is at least {0}x{0}", cfg.patch)));
        }
        let img = &images[rng.random_range(0..images.len())];
        if let Some(p) = crop_patch(img, cfg.patch, rng)? {
            items.push(p);
        }
    }
    Tensor::stack(&items)
}

/// Where a training run writes its outputs.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the layout; an existing non-empty directory is only reused
    /// with `force`.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.exists() && std::fs::read_dir(root)?.next().is_some() && !force {
            return Err(Error::Input(format!(
                "run directory {} already exists (use --force to overwrite)",
                root.display()
            )));
        }
        for sub in ["checkpoints", "logs", "reports"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<StepStats>,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.history.first().map(|s| s.loss)
    }

    /// Mean loss over the last `k` steps.
    pub fn final_loss(&self, k: usize) -> Option<f64> {
        let n = self.history.len();
        if n == 0 {
            return None;
        }
        let tail = &self.history[n.saturating_sub(k)..];
        Some(tail.iter().map(|s| s.loss).sum::<f64>() / tail.len() as f64)
    }
}

/// Runs the configured schedule over `images` (`[1, 3, H, W]` each, values
/// in `[0, 1]`). With a run directory, metrics go to `logs/metrics.jsonl`
/// and a checkpoint is written after every epoch.
pub fn train_loop<T: Scalar>(
    model: &mut OmrNet<T>,
    images: &[Tensor<T>],
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Input("no training images".into()));
    }
    let usable = images.iter().filter(|im| {
        let s = im.shape();
        s.len() == 4 && s[2] >= cfg.patch && s[3] >= cfg.patch
    });
    let skipped = images.len() - usable.count();
    if skipped > 0 {
        warn!("{skipped} training images are smaller than the {0}x{0} patch and are skipped", cfg.patch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut adam = Adam::new(&model.store);
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or_else(|| images.len().div_ceil(cfg.batch_size)).max(1);
    let mut log = match run {
        Some(r) => Some(std::io::BufWriter::new(std::fs::File::create(r.logs().join("metrics.jsonl"))?)),
        None => None,
    };
    let mut history = Vec::new();
    let mut final_checkpoint = None;
    'outer: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for _ in 0..steps_per_epoch {
            if cfg.max_steps.is_some_and(|m| history.len() >= m) {
                break 'outer;
            }
            let batch = sample_batch(images, cfg, &mut rng)?;
            let mut stats = match train_step(model, &mut adam, &batch, cfg, lr, &mut rng) {
                Ok(s) => s,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(r) = run {
                        let dump = r.logs().join("nonfinite_dump.txt");
                        std::fs::write(&dump, format!("step {}\n{e}\n", adam.steps() + 1))?;
                        model.save(&r.checkpoints().join("nonfinite.ckpt"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            stats.epoch = epoch;
            let step = stats.step as usize;
            if step == 1 || step.is_multiple_of(cfg.log_interval.max(1)) {
                info!(
                    "step {step} epoch {epoch} loss {:.4} bpp {:.4} psnr {:.2} dB |g| {:.3}",
                    stats.loss, stats.bpp_total, stats.psnr, stats.grad_norm
                );
                if let Some(f) = log.as_mut() {
                    serde_json::to_writer(&mut *f, &stats)?;
                    f.write_all(b"\n")?;
                    f.flush()?;
                }
            }
            history.push(stats);
        }
        if let Some(r) = run {
            let p = r.checkpoints().join(format!("epoch_{epoch:04}.ckpt"));
            model.save(&p)?;
            final_checkpoint = Some(p);
        }
    }
    if let Some(r) = run {
        let p = r.checkpoints().join("final.ckpt");
        model.save(&p)?;
        final_checkpoint = Some(p);
    }
    Ok(TrainReport { history, final_checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlinear::NonlinearKind;

    #[test]
    fn loss_arithmetic() {
        assert!((rd_loss_value(0.013, 0.0001, 0.5) - 0.5845325).abs() < 1e-9);
        let d1 = rd_loss_value(0.013, 0.002, 0.0);
        let d2 = rd_loss_value(0.026, 0.002, 0.0);
        assert_eq!(d2, 2.0 * d1);
    }

    #[test]
    fn perfect_reconstruction_with_certain_latents_costs_nothing() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::full(&[1, 3, 4, 4], 0.3));
        let zero = tape.constant(Tensor::scalar(0.0));
        let bits = [zero.clone(), zero.clone(), zero.clone(), zero];
        let l = rd_loss(&tape, &x, &x, &bits, 16, 0.013).unwrap();
        assert_eq!(l.loss.value().data()[0], 0.0);
        let y = tape.constant(Tensor::full(&[1, 3, 4, 3], 0.3));
        assert!(rd_loss(&tape, &x, &y, &bits, 16, 0.013).is_err());
    }

    #[test]
    fn schedule_drops_at_epoch_300() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(299), 1e-4);
        assert_eq!(c.lr_at(300), 1e-5);
        assert_eq!(c.lr_at(399), 1e-5);
    }

    #[test]
    fn crop_is_identity_at_full_size_and_reproducible() {
        let img = Tensor::<f32>::from_fn(&[1, 3, 64, 64], |i| i as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(crop_patch(&img, 64, &mut rng).unwrap().unwrap(), img);
        assert!(crop_patch(&img, 128, &mut rng).unwrap().is_none());
        let big = Tensor::<f32>::from_fn(&[1, 3, 512, 512], |i| i as f32);
        let a = crop_patch(&big, 256, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = crop_patch(&big, 256, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // offsets over a 16-pixel margin: chi-square against uniform
        let img = Tensor::<f32>::from_fn(&[1, 1, 79, 79], |i| (i % 79) as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 16];
        let n = 10_000;
        for _ in 0..n {
            let p = crop_patch(&img, 64, &mut rng).unwrap().unwrap();
            counts[p.data()[0] as usize] += 1;
        }
        let e = n as f64 / 16.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 15 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 37.7, "{chi2}");
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(&store);
        for _ in 0..2000 {
            let g = store.get(id).map(|v| 2.0 * v);
            adam.step(&mut store, &[Some(g)], 0.01);
        }
        assert!(store.get(id).max_abs() < 1e-3);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = vec![Some(Tensor::from_vec(&[2], vec![3.0f64, 4.0]).unwrap()), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_step_gradients_are_finite() {
        let cfg = TrainConfig {
            model: ModelConfig { n: 8, nonlinear: NonlinearKind::Ctmsrb, ..ModelConfig::default() },
            batch_size: 1,
            patch: 64,
            ..TrainConfig::default()
        };
        let mut model = OmrNet::<f32>::new(cfg.model.clone(), 1).unwrap();
        let mut adam = Adam::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = Tensor::uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng);
        let s = train_step(&mut model, &mut adam, &batch, &cfg, 1e-4, &mut rng).unwrap();
        assert!(s.loss.is_finite() && s.grad_norm.is_finite() && s.loss >= 0.0);
    }

    #[test]
    fn run_dir_refuses_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        RunDir::create(&root, false).unwrap();
        std::fs::write(root.join("config.json"), "{}").unwrap();
        assert!(RunDir::create(&root, false).is_err());
        assert!(RunDir::create(&root, true).is_ok());
    }
}
