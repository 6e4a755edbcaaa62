//! im2col-based 2-D convolution and transposed convolution kernels.

use crate::error::{shape_err, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Stride/padding of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    /// Extra rows/cols appended to a transposed convolution's output.
    pub out_pad: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeom { stride, pad, out_pad: 0 }
    }

    /// Geometry of a transposed convolution that exactly doubles resolution
    /// (for odd kernels, `pad = k / 2`; for `k == 2`, no padding).
    pub fn upsample2(k: usize) -> Self {
        if k == 2 {
            ConvGeom { stride: 2, pad: 0, out_pad: 0 }
        } else {
            ConvGeom { stride: 2, pad: k / 2, out_pad: 1 }
        }
    }

    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        if padded < k || self.stride == 0 {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }

    pub fn t_out_len(&self, len: usize, k: usize) -> Option<usize> {
        if len == 0 || self.stride == 0 {
            return None;
        }
        ((len - 1) * self.stride + k + self.out_pad).checked_sub(2 * self.pad)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, g: ConvGeom) -> bool {
    k == 1 && g.stride == 1 && g.pad == 0
}

fn kernel_dims<T: Scalar>(w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match w.shape()[..] {
        [a, b, k, k2] if k == k2 => Ok((a, b, k)),
        _ => Err(shape_err!("kernel must be [a, b, k, k], got {:?}", w.shape())),
    }
}

fn check_bias<T: Scalar>(b: Option<&Tensor<T>>, co: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [co] {
            return Err(shape_err!("bias {:?} for {} output channels", b.shape(), co));
        }
    }
    Ok(())
}

/// Output shape of a convolution, validating channel counts.
pub fn conv2d_shape<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Result<[usize; 4]> {
    let (n, ci, h, wd) = x.dims4()?;
    let (co, wci, k) = kernel_dims(w)?;
    if wci != ci {
        return Err(shape_err!("conv kernel expects {} input channels, input has {}", wci, ci));
    }
    let ho = g.out_len(h, k).ok_or_else(|| shape_err!("input {h}x{wd} too small for k={k}"))?;
    let wo = g.out_len(wd, k).ok_or_else(|| shape_err!("input {h}x{wd} too small for k={k}"))?;
    Ok([n, co, ho, wo])
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let [n, co, ho, wo] = conv2d_shape(x, w, g)?;
    check_bias(b, co)?;
    let (_, ci, h, wd) = x.dims4()?;
    let k = w.shape()[2];
    let ckk = ci * k * k;
    let (hw_in, hw_out) = (h * wd, ho * wo);
    let mut out = vec![T::zero(); n * co * hw_out];
    let pointwise = is_pointwise(k, g);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); ckk * hw_out] };
    for bi in 0..n {
        let xs = &x.data()[bi * ci * hw_in..(bi + 1) * ci * hw_in];
        let os = &mut out[bi * co * hw_out..(bi + 1) * co * hw_out];
        if let Some(b) = b {
            for (o, chunk) in os.chunks_mut(hw_out).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let colref = if pointwise {
            xs
        } else {
            im2col(xs, ci, h, wd, k, g, ho, wo, &mut col);
            &col[..]
        };
        gemm(MatRef::new(w.data(), co, ckk), MatRef::new(colref, ckk, hw_out), beta, os);
    }
    Tensor::from_vec(&[n, co, ho, wo], out)
}

pub struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub w: Option<Tensor<T>>,
    pub b: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: ConvGeom,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (n, ci, h, wd) = x.dims4()?;
    let (co, _, k) = kernel_dims(w)?;
    let (_, _, ho, wo) = gy.dims4()?;
    let ckk = ci * k * k;
    let (hw_in, hw_out) = (h * wd, ho * wo);
    let pointwise = is_pointwise(k, g);
    let mut gx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut gw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut gb = need.2.then(|| vec![T::zero(); co]);
    let mut col = vec![T::zero(); if pointwise { 0 } else { ckk * hw_out }];
    let mut gcol = vec![T::zero(); if pointwise || !need.0 { 0 } else { ckk * hw_out }];
    for bi in 0..n {
        let xs = &x.data()[bi * ci * hw_in..(bi + 1) * ci * hw_in];
        let gys = &gy.data()[bi * co * hw_out..(bi + 1) * co * hw_out];
        if let Some(gw) = gw.as_mut() {
            let colref = if pointwise {
                xs
            } else {
                im2col(xs, ci, h, wd, k, g, ho, wo, &mut col);
                &col[..]
            };
            gemm(MatRef::new(gys, co, hw_out), MatRef::t(colref, ckk, hw_out), T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            let gxs = &mut gx[bi * ci * hw_in..(bi + 1) * ci * hw_in];
            if pointwise {
                gemm(MatRef::t(w.data(), co, ckk), MatRef::new(gys, co, hw_out), T::zero(), gxs);
            } else {
                gemm(MatRef::t(w.data(), co, ckk), MatRef::new(gys, co, hw_out), T::zero(), &mut gcol);
                col2im(&gcol, ci, h, wd, k, g, ho, wo, gxs);
            }
        }
        if let Some(gb) = gb.as_mut() {
            for (o, chunk) in gys.chunks(hw_out).enumerate() {
                gb[o] += chunk.iter().copied().sum::<T>();
            }
        }
    }
    Ok(ConvGrads {
        x: gx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
        w: gw.map(|d| Tensor::from_vec(w.shape(), d)).transpose()?,
        b: gb.map(|d| Tensor::from_vec(&[co], d)).transpose()?,
    })
}

/// Output shape of a transposed convolution; kernel layout `[c_in, c_out, k, k]`.
pub fn conv_t2d_shape<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Result<[usize; 4]> {
    let (n, ci, h, wd) = x.dims4()?;
    let (wci, co, k) = kernel_dims(w)?;
    if wci != ci {
        return Err(shape_err!("transposed kernel expects {} input channels, input has {}", wci, ci));
    }
    let ho = g.t_out_len(h, k).ok_or_else(|| shape_err!("bad transposed geometry"))?;
    let wo = g.t_out_len(wd, k).ok_or_else(|| shape_err!("bad transposed geometry"))?;
    Ok([n, co, ho, wo])
}

pub fn conv_t2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let [n, co, ho, wo] = conv_t2d_shape(x, w, g)?;
    check_bias(b, co)?;
    let (_, ci, h, wd) = x.dims4()?;
    let k = w.shape()[2];
    let ckk = co * k * k;
    let (hw_in, hw_out) = (h * wd, ho * wo);
    let mut out = vec![T::zero(); n * co * hw_out];
    let mut col = vec![T::zero(); ckk * hw_in];
    for bi in 0..n {
        let xs = &x.data()[bi * ci * hw_in..(bi + 1) * ci * hw_in];
        let os = &mut out[bi * co * hw_out..(bi + 1) * co * hw_out];
        gemm(MatRef::t(w.data(), ci, ckk), MatRef::new(xs, ci, hw_in), T::zero(), &mut col);
        col2im(&col, co, ho, wo, k, g, h, wd, os);
        if let Some(b) = b {
            for (o, chunk) in os.chunks_mut(hw_out).enumerate() {
                let bv = b.data()[o];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_vec(&[n, co, ho, wo], out)
}

pub fn conv_t2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: ConvGeom,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (n, ci, h, wd) = x.dims4()?;
    let (_, co, k) = kernel_dims(w)?;
    let (_, _, ho, wo) = gy.dims4()?;
    let ckk = co * k * k;
    let (hw_in, hw_out) = (h * wd, ho * wo);
    let mut gx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut gw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut gb = need.2.then(|| vec![T::zero(); co]);
    let mut gcol = vec![T::zero(); ckk * hw_in];
    for bi in 0..n {
        let gys = &gy.data()[bi * co * hw_out..(bi + 1) * co * hw_out];
        if need.0 || need.1 {
            im2col(gys, co, ho, wo, k, g, h, wd, &mut gcol);
        }
        if let Some(gx) = gx.as_mut() {
            let gxs = &mut gx[bi * ci * hw_in..(bi + 1) * ci * hw_in];
            gemm(MatRef::new(w.data(), ci, ckk), MatRef::new(&gcol, ckk, hw_in), T::zero(), gxs);
        }
        if let Some(gw) = gw.as_mut() {
            let xs = &x.data()[bi * ci * hw_in..(bi + 1) * ci * hw_in];
            gemm(MatRef::new(xs, ci, hw_in), MatRef::t(&gcol, ckk, hw_in), T::one(), gw);
        }
        if let Some(gb) = gb.as_mut() {
            for (o, chunk) in gys.chunks(hw_out).enumerate() {
                gb[o] += chunk.iter().copied().sum::<T>();
            }
        }
    }
    Ok(ConvGrads {
        x: gx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
        w: gw.map(|d| Tensor::from_vec(w.shape(), d)).transpose()?,
        b: gb.map(|d| Tensor::from_vec(&[co], d)).transpose()?,
    })
}
