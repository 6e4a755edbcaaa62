//! Integer range coder with byte-wise renormalisation and carry propagation,
//! and the 16-bit quantised CDFs it codes with.
//!
//! Every table has total mass [`CDF_TOTAL`]. Symbols own `cum[i]..cum[i+1]`;
//! whatever mass rounding leaves over sits in an uncoded overflow interval
//! at the top so per-symbol frequencies stay proportional to the model.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};

pub const CDF_BITS: u32 = 16;
pub const CDF_TOTAL: u32 = 1 << CDF_BITS;
/// Largest alphabet a single table may describe.
pub const MAX_ALPHABET: usize = 1 << 14;

const TOP: u32 = 1 << 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    /// Symbol value of index 0.
    pub offset: i32,
    /// Cumulative frequencies, `len = alphabet + 1`, `cum[0] = 0`.
    cum: Vec<u32>,
}

impl QuantizedCdf {
    /// From explicit frequencies (each ≥ 1, sum ≤ [`CDF_TOTAL`]).
    pub fn from_freqs(offset: i32, freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() || freqs.len() > MAX_ALPHABET {
            return Err(Error::Encode(format!("alphabet size {} outside 1..={MAX_ALPHABET}", freqs.len())));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0u32);
        let mut acc = 0u64;
        for &f in freqs {
            if f == 0 {
                return Err(Error::Encode("zero-frequency symbol".into()));
            }
            acc += u64::from(f);
            if acc > u64::from(CDF_TOTAL) {
                return Err(Error::Encode(format!("frequencies sum past {CDF_TOTAL}")));
            }
            cum.push(acc as u32);
        }
        Ok(QuantizedCdf { offset, cum })
    }

    /// Quantise a probability vector: `max(1, round(p * total))` per
    /// symbol, then trimmed from the largest entries if the sum overshoots.
    pub fn from_probs(offset: i32, probs: &[f64]) -> Result<Self> {
        if probs.len() > MAX_ALPHABET || probs.is_empty() {
            return Err(Error::Encode(format!("alphabet size {} outside 1..={MAX_ALPHABET}", probs.len())));
        }
        let total = f64::from(CDF_TOTAL);
        let mut freqs: Vec<u32> = probs
            .iter()
            .map(|&p| {
                let p = if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
                ((p * total).round() as u32).max(1)
            })
            .collect();
        let mut sum: u64 = freqs.iter().map(|&f| u64::from(f)).sum();
        if sum > u64::from(CDF_TOTAL) {
            let mut heap: BinaryHeap<(u32, usize)> = freqs.iter().enumerate().map(|(i, &f)| (f, i)).collect();
            while sum > u64::from(CDF_TOTAL) {
                let (f, i) = heap.pop().expect("alphabet fits in total");
                debug_assert!(f > 1);
                freqs[i] = f - 1;
                sum -= 1;
                heap.push((f - 1, i));
            }
        }
        Self::from_freqs(offset, &freqs)
    }

    pub fn alphabet(&self) -> usize {
        self.cum.len() - 1
    }

    /// Mass actually assigned to symbols.
    pub fn coded_total(&self) -> u32 {
        *self.cum.last().unwrap()
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.cum[index + 1] - self.cum[index]
    }

    /// Ideal code length of a symbol under this table, in bits.
    pub fn cost_bits(&self, symbol: i32) -> Option<f64> {
        let i = self.index_of(symbol)?;
        Some(f64::from(CDF_BITS) - f64::from(self.freq(i)).log2())
    }

    fn index_of(&self, symbol: i32) -> Option<usize> {
        let i = i64::from(symbol) - i64::from(self.offset);
        (i >= 0 && (i as usize) < self.alphabet()).then_some(i as usize)
    }
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    pub fn encode(&mut self, symbol: i32, cdf: &QuantizedCdf) -> Result<()> {
        let i = cdf.index_of(symbol).ok_or_else(|| {
            Error::Encode(format!(
                "symbol {symbol} outside alphabet [{}, {}]",
                cdf.offset,
                i64::from(cdf.offset) + cdf.alphabet() as i64 - 1
            ))
        })?;
        let r = self.range >> CDF_BITS;
        self.low += u64::from(r) * u64::from(cdf.cum[i]);
        self.range = r * cdf.freq(i);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        // the leading byte is the initial empty cache and is always zero
        debug_assert_eq!(self.out[0], 0);
        self.out.remove(0);
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder { data, pos: 0, code: 0, range: u32::MAX };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte()?);
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.data.get(self.pos).ok_or_else(|| Error::Decode("range coder stream truncated".into()))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, cdf: &QuantizedCdf) -> Result<i32> {
        let r = self.range >> CDF_BITS;
        let target = self.code / r;
        if target >= cdf.coded_total() {
            return Err(Error::Decode("range coder target outside the coded interval".into()));
        }
        // last i with cum[i] <= target
        let i = cdf.cum.partition_point(|&c| c <= target) - 1;
        self.code -= r * cdf.cum[i];
        self.range = r * cdf.freq(i);
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
            self.range <<= 8;
        }
        Ok(cdf.offset + i as i32)
    }

    /// Checks that the stream was consumed exactly.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Decode(format!(
                "{} trailing bytes after the last symbol",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn roundtrip(symbols: &[i32], cdfs: &[QuantizedCdf]) -> Vec<u8> {
        let mut enc = RangeEncoder::new();
        for (s, c) in symbols.iter().zip(cdfs) {
            enc.encode(*s, c).unwrap();
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for (s, c) in symbols.iter().zip(cdfs) {
            assert_eq!(dec.decode(c).unwrap(), *s);
        }
        dec.finish().unwrap();
        bytes
    }

    #[test]
    fn empty_stream() {
        let bytes = roundtrip(&[], &[]);
        assert_eq!(bytes.len(), 4);
    }

    #[test]
    fn uniform_256() {
        let cdf = QuantizedCdf::from_probs(0, &[1.0 / 256.0; 256]).unwrap();
        assert_eq!(cdf.coded_total(), CDF_TOTAL);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<i32> = (0..1000).map(|_| rng.random_range(0..256)).collect();
        let bytes = roundtrip(&s, &vec![cdf; 1000]);
        assert!((1000..=1010).contains(&bytes.len()), "{}", bytes.len());
    }

    #[test]
    fn trimming_keeps_every_symbol_codable() {
        let mut p = vec![1e-9; 300];
        p[7] = 1.0;
        let cdf = QuantizedCdf::from_probs(-10, &p).unwrap();
        assert_eq!(cdf.coded_total(), CDF_TOTAL);
        assert!((0..300).all(|i| cdf.freq(i) >= 1));
        let s: Vec<i32> = vec![-3, -10, 289, -3, 100];
        roundtrip(&s, &vec![cdf; 5]);
    }

    #[test]
    fn rejects_out_of_alphabet_and_oversized() {
        let cdf = QuantizedCdf::from_probs(0, &[0.5, 0.5]).unwrap();
        let mut enc = RangeEncoder::new();
        assert!(matches!(enc.encode(2, &cdf), Err(Error::Encode(_))));
        assert!(matches!(enc.encode(-1, &cdf), Err(Error::Encode(_))));
        assert!(QuantizedCdf::from_probs(0, &vec![0.0; MAX_ALPHABET + 1]).is_err());
    }

    #[test]
    fn truncated_and_padded_streams_fail() {
        let cdf = QuantizedCdf::from_probs(0, &[1.0 / 256.0; 256]).unwrap();
        let s: Vec<i32> = (0..50).map(|i| (i * 37) % 256).collect();
        let mut enc = RangeEncoder::new();
        for &v in &s {
            enc.encode(v, &cdf).unwrap();
        }
        let bytes = enc.finish();
        let decode_all = |b: &[u8]| -> Result<()> {
            let mut d = RangeDecoder::new(b)?;
            for _ in 0..s.len() {
                d.decode(&cdf)?;
            }
            d.finish()
        };
        assert!(matches!(decode_all(&bytes[..bytes.len() - 2]), Err(Error::Decode(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode_all(&longer), Err(Error::Decode(_))));
    }

    #[test]
    fn overflow_region_is_rejected() {
        // a table that codes only half the mass; a stream of 0xFF bytes
        // lands in the uncoded top half
        let cdf = QuantizedCdf::from_freqs(0, &[CDF_TOTAL / 4, CDF_TOTAL / 4]).unwrap();
        let bytes = [0xFFu8; 8];
        let mut d = RangeDecoder::new(&bytes).unwrap();
        assert!(matches!(d.decode(&cdf), Err(Error::Decode(_))));
    }
}
