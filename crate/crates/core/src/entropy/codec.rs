//! Substream coding of quantised latents. Each payload starts with the
//! symbol range `[min, max]` as two little-endian `i32`, followed by the
//! range-coder bytes.

use crate::entropy::context::ContextEntropy;
use crate::entropy::factorized::FactorizedPrior;
use crate::entropy::gaussian::cdf_table;
use crate::entropy::quantize::to_symbols;
use crate::entropy::range_coder::{RangeDecoder, RangeEncoder, MAX_ALPHABET};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn symbol_range(symbols: &[i32]) -> Result<(i32, i32)> {
    let lo = symbols.iter().copied().min().unwrap_or(0);
    let hi = symbols.iter().copied().max().unwrap_or(0);
    check_range(lo, hi)?;
    Ok((lo, hi))
}

fn check_range(lo: i32, hi: i32) -> Result<()> {
    let size = i64::from(hi) - i64::from(lo) + 1;
    if size < 1 || size > MAX_ALPHABET as i64 {
        return Err(Error::Encode(format!("symbol range [{lo}, {hi}] exceeds the {MAX_ALPHABET}-symbol alphabet")));
    }
    Ok(())
}

fn with_range(lo: i32, hi: i32, body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + body.len());
    out.extend_from_slice(&lo.to_le_bytes());
    out.extend_from_slice(&hi.to_le_bytes());
    out.extend(body);
    out
}

fn split_range(payload: &[u8]) -> Result<(i32, i32, &[u8])> {
    if payload.len() < 8 {
        return Err(Error::Decode("substream shorter than its range header".into()));
    }
    let lo = i32::from_le_bytes(payload[..4].try_into().unwrap());
    let hi = i32::from_le_bytes(payload[4..8].try_into().unwrap());
    check_range(lo, hi).map_err(|e| Error::Decode(e.to_string()))?;
    Ok((lo, hi, &payload[8..]))
}

fn single(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!("coding expects a single [1, C, H, W] tensor, got {shape:?}"))),
    }
}

/// Codes hyper-latents channel by channel with the factorized prior.
pub fn encode_factorized<T: Scalar>(z: &Tensor<T>, prior: &FactorizedPrior, store: &ParamStore<T>) -> Result<Vec<u8>> {
    let (c, h, w) = single(z.shape())?;
    if c != prior.channels {
        return Err(Error::Shape(format!("prior has {} channels, latent {c}", prior.channels)));
    }
    let symbols = to_symbols(z)?;
    let (lo, hi) = symbol_range(&symbols)?;
    let mut enc = RangeEncoder::new();
    for ch in 0..c {
        let table = prior.cdf_table(store, ch, lo, hi)?;
        for &s in &symbols[ch * h * w..(ch + 1) * h * w] {
            enc.encode(s, &table)?;
        }
    }
    Ok(with_range(lo, hi, enc.finish()))
}

pub fn decode_factorized<T: Scalar>(
    payload: &[u8],
    prior: &FactorizedPrior,
    store: &ParamStore<T>,
    shape: &[usize],
) -> Result<Tensor<T>> {
    let (c, h, w) = single(shape)?;
    let (lo, hi, body) = split_range(payload)?;
    let mut dec = RangeDecoder::new(body)?;
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let table = prior.cdf_table(store, ch, lo, hi)?;
        for _ in 0..h * w {
            out.push(T::c(f64::from(dec.decode(&table)?)));
        }
    }
    dec.finish()?;
    Tensor::from_vec(shape, out)
}

/// Codes main latents position by position in raster order, all channels of
/// a position together, with Gaussian parameters from the serial context
/// path.
pub fn encode_gaussian<T: Scalar>(
    y: &Tensor<T>,
    hyper: &Tensor<T>,
    model: &ContextEntropy,
    store: &ParamStore<T>,
) -> Result<Vec<u8>> {
    let (m, h, w) = single(y.shape())?;
    check_hyper(hyper, model.m, m, h, w)?;
    let symbols = to_symbols(y)?;
    let (lo, hi) = symbol_range(&symbols)?;
    let serial = model.serial(store)?;
    let mut enc = RangeEncoder::new();
    for py in 0..h {
        for px in 0..w {
            let (mu, sigma) = serial.params_at(y.data(), hyper.data(), h, w, py, px);
            for c in 0..m {
                let table = cdf_table(mu[c].f64(), sigma[c].f64(), lo, hi)?;
                enc.encode(symbols[(c * h + py) * w + px], &table)?;
            }
        }
    }
    Ok(with_range(lo, hi, enc.finish()))
}

pub fn decode_gaussian<T: Scalar>(
    payload: &[u8],
    hyper: &Tensor<T>,
    model: &ContextEntropy,
    store: &ParamStore<T>,
    shape: &[usize],
) -> Result<Tensor<T>> {
    let (m, h, w) = single(shape)?;
    check_hyper(hyper, model.m, m, h, w)?;
    let (lo, hi, body) = split_range(payload)?;
    let serial = model.serial(store)?;
    let mut dec = RangeDecoder::new(body)?;
    let mut y = vec![T::zero(); m * h * w];
    for py in 0..h {
        for px in 0..w {
            let (mu, sigma) = serial.params_at(&y, hyper.data(), h, w, py, px);
            for c in 0..m {
                let table = cdf_table(mu[c].f64(), sigma[c].f64(), lo, hi)?;
                y[(c * h + py) * w + px] = T::c(f64::from(dec.decode(&table)?));
            }
        }
    }
    dec.finish()?;
    Tensor::from_vec(shape, y)
}

fn check_hyper<T: Scalar>(hyper: &Tensor<T>, model_m: usize, m: usize, h: usize, w: usize) -> Result<()> {
    if model_m != m || hyper.shape() != [1, 2 * m, h, w] {
        return Err(Error::Shape(format!(
            "hyper features {:?} do not match a {m}x{h}x{w} latent (model over {model_m})",
            hyper.shape()
        )));
    }
    Ok(())
}
