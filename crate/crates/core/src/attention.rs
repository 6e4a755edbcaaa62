//! Window attention module (WAM): a residual trunk gated elementwise by a
//! mask branch built on single-head self-attention inside non-overlapping
//! spatial windows.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Ctx};
use crate::params::Init;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default attention window edge.
pub const WINDOW_SIZE: usize = 8;

/// Features regrouped into windows.
///
/// `windows` has shape `[n * num_windows, win_h * win_w, c]`; windows are
/// ordered batch-major then row-major over the window grid, and positions
/// inside a window are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrid<T> {
    pub windows: Tensor<T>,
    /// Original `[n, c, h, w]`.
    pub dims: [usize; 4],
    pub win_h: usize,
    pub win_w: usize,
}

impl<T> WindowGrid<T> {
    pub fn num_windows(&self) -> usize {
        let [n, _, h, w] = self.dims;
        n * (h / self.win_h) * (w / self.win_w)
    }
}

/// Source offset into an NCHW buffer for every element of the partitioned
/// layout.
fn partition_index(dims: [usize; 4], win_h: usize, win_w: usize) -> Vec<usize> {
    let [n, c, h, w] = dims;
    let (gh, gw) = (h / win_h, w / win_w);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for wy in 0..gh {
            for wx in 0..gw {
                for py in 0..win_h {
                    for px in 0..win_w {
                        let (y, x) = (wy * win_h + py, wx * win_w + px);
                        for ch in 0..c {
                            idx.push(((b * c + ch) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse permutation of [`partition_index`].
fn unpartition_index(dims: [usize; 4], win_h: usize, win_w: usize) -> Vec<usize> {
    let fwd = partition_index(dims, win_h, win_w);
    let mut inv = vec![0; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

fn check_divisible(h: usize, w: usize, win_h: usize, win_w: usize) -> Result<()> {
    if win_h == 0 || win_w == 0 || !h.is_multiple_of(win_h) || !w.is_multiple_of(win_w) {
        return Err(Error::Dimension(format!(
            "{h}x{w} is not divisible into {win_h}x{win_w} windows"
        )));
    }
    Ok(())
}

/// Partition NCHW features into square `w_size` windows.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, w_size: usize) -> Result<WindowGrid<T>> {
    window_partition_rect(x, w_size, w_size)
}

pub fn window_partition_rect<T: Scalar>(x: &Tensor<T>, win_h: usize, win_w: usize) -> Result<WindowGrid<T>> {
    let (n, c, h, w) = x.dims4()?;
    check_divisible(h, w, win_h, win_w)?;
    let dims = [n, c, h, w];
    let src = x.data();
    let data = partition_index(dims, win_h, win_w).into_iter().map(|i| src[i]).collect();
    let nw = n * (h / win_h) * (w / win_w);
    Ok(WindowGrid { windows: Tensor::from_vec(&[nw, win_h * win_w, c], data)?, dims, win_h, win_w })
}

pub fn window_unpartition<T: Scalar>(grid: &WindowGrid<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = grid.dims;
    check_divisible(h, w, grid.win_h, grid.win_w)?;
    if grid.windows.len() != n * c * h * w {
        return Err(Error::Shape(format!("window grid {:?} does not cover {:?}", grid.windows.shape(), grid.dims)));
    }
    let src = grid.windows.data();
    let data = unpartition_index(grid.dims, grid.win_h, grid.win_w).into_iter().map(|i| src[i]).collect();
    Tensor::from_vec(&grid.dims, data)
}

/// Window edge used along an axis of length `dim`: the largest divisor of
/// `dim` not exceeding `w_size`, so small or odd-sized maps still tile
/// exactly.
pub fn effective_window(dim: usize, w_size: usize) -> usize {
    (1..=w_size.min(dim).max(1)).rev().find(|d| dim.is_multiple_of(*d)).unwrap_or(1)
}

/// `x + conv1x1(relu(conv3x3(relu(conv1x1(x)))))` with a halved bottleneck.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    reduce: Conv2d,
    mid: Conv2d,
    expand: Conv2d,
}

impl ResidualUnit {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, c: usize) -> Self {
        let h = (c / 2).max(1);
        init.scope(name, |init| ResidualUnit {
            reduce: Conv2d::new(init, "reduce", c, h, 1, 1, true),
            mid: Conv2d::new(init, "mid", h, h, 3, 1, true),
            expand: Conv2d::with_gain(init, "expand", h, c, 1, 1, true, 0.5),
        })
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let t = cx.tape;
        let h = t.relu(&self.reduce.forward(cx, x)?);
        let h = t.relu(&self.mid.forward(cx, &h)?);
        t.add(x, &self.expand.forward(cx, &h)?)
    }
}

/// Intermediate values of one WAM evaluation.
pub struct WamTrace<T> {
    pub out: Var<T>,
    /// Attention-stage output `x + proj(attn(x))`, before any spatial mixing.
    pub attended: Var<T>,
    /// Softmax weights, `[num_windows, L, L]`.
    pub weights: Var<T>,
    /// Sigmoid gate, same shape as the input.
    pub gate: Var<T>,
}

#[derive(Clone, Debug)]
pub struct Wam {
    trunk: Vec<ResidualUnit>,
    qv: Conv2d,
    // a key bias only shifts each softmax row, so it would never train
    k: Conv2d,
    proj: Conv2d,
    mask_units: Vec<ResidualUnit>,
    pub mask_out: Conv2d,
    pub channels: usize,
    pub w_size: usize,
}

impl Wam {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, c: usize, w_size: usize) -> Self {
        init.scope(name, |init| {
            let trunk = (0..2).map(|i| ResidualUnit::new(init, &format!("trunk{i}"), c)).collect();
            let qv = Conv2d::new(init, "qv", c, 2 * c, 1, 1, true);
            let k = Conv2d::new(init, "k", c, c, 1, 1, false);
            let proj = Conv2d::with_gain(init, "proj", c, c, 1, 1, true, 0.5);
            let mask_units = (0..2).map(|i| ResidualUnit::new(init, &format!("mask{i}"), c)).collect();
            let mask_out = Conv2d::new(init, "mask_out", c, c, 1, 1, true);
            Wam { trunk, qv, k, proj, mask_units, mask_out, channels: c, w_size }
        })
    }

    pub fn forward<T: Scalar>(&self, cx: Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.trace(cx, x)?.out)
    }

    pub fn trace<T: Scalar>(&self, cx: Ctx<'_, T>, x: &Var<T>) -> Result<WamTrace<T>> {
        let t = cx.tape;
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("WAM over {} channels applied to {c}", self.channels)));
        }
        let mut trunk = x.clone();
        for u in &self.trunk {
            trunk = u.forward(cx, &trunk)?;
        }

        let (wh, ww) = (effective_window(h, self.w_size), effective_window(w, self.w_size));
        let dims = [n, c, h, w];
        let nw = n * (h / wh) * (w / ww);
        let l = wh * ww;
        let fwd = Rc::new(partition_index(dims, wh, ww));
        let qv = self.qv.forward(cx, x)?;
        let windows = |s: &Var<T>| t.gather(s, fwd.clone(), &[nw, l, c]);
        let q = windows(&t.slice(&qv, 0, c)?)?;
        let v = windows(&t.slice(&qv, c, c)?)?;
        let k = windows(&self.k.forward(cx, x)?)?;
        let scores = t.scale(&t.bmm(&q, &k, true)?, 1.0 / (c as f64).sqrt());
        let weights = t.softmax_last(&scores);
        let ctx = t.bmm(&weights, &v, false)?;
        let ctx = t.gather(&ctx, Rc::new(unpartition_index(dims, wh, ww)), &dims)?;
        let attended = t.add(x, &self.proj.forward(cx, &ctx)?)?;

        let mut m = attended.clone();
        for u in &self.mask_units {
            m = u.forward(cx, &m)?;
        }
        let gate = t.sigmoid(&self.mask_out.forward(cx, &m)?);
        let out = t.add(x, &t.mul(&trunk, &gate)?)?;
        Ok(WamTrace { out, attended, weights, gate })
    }
}

/// Convenience: run a WAM on an inference tape.
pub fn wam_forward<T: Scalar>(wam: &Wam, store: &crate::params::ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    Ok(wam.forward(Ctx::new(&tape, store), &tape.constant(x.clone()))?.value().clone())
}
