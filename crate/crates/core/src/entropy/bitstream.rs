//! `.omr` container: fixed header followed by four length-prefixed
//! substreams in the order z-high, z-low, y-high, y-low.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OMR1";
pub const VERSION: u8 = 1;
/// Magic, version, config id, lambda index, alpha, width, height.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 1 + 1 + 4 + 4;
/// Lambda index recorded for values outside the standard set.
pub const CUSTOM_LAMBDA: u8 = 255;

pub const STREAM_NAMES: [&str; 4] = ["z_high", "z_low", "y_high", "y_low"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub config_id: u8,
    pub lambda_index: u8,
    /// Octave ratio times 100.
    pub alpha_pct: u8,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub streams: [Vec<u8>; 4],
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(MAGIC);
        let h = &self.header;
        out.extend_from_slice(&[h.version, h.config_id, h.lambda_index, h.alpha_pct]);
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        for s in &self.streams {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s);
        }
        out
    }

    /// Parses a container. A wrong version is reported before anything else
    /// after the magic.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an .omr stream (bad magic)".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Version { found: bytes[4], expected: VERSION });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Decode("stream truncated inside the header".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let header = Header {
            version: bytes[4],
            config_id: bytes[5],
            lambda_index: bytes[6],
            alpha_pct: bytes[7],
            width: u32_at(8),
            height: u32_at(12),
        };
        let mut pos = HEADER_LEN;
        let mut streams: [Vec<u8>; 4] = Default::default();
        for (s, name) in streams.iter_mut().zip(STREAM_NAMES) {
            if bytes.len() < pos + 4 {
                return Err(Error::Decode(format!("stream truncated before the {name} length")));
            }
            let n = u32_at(pos) as usize;
            pos += 4;
            if bytes.len() < pos + n {
                return Err(Error::Decode(format!("{name} substream truncated")));
            }
            *s = bytes[pos..pos + n].to_vec();
            pos += n;
        }
        if pos != bytes.len() {
            return Err(Error::Decode(format!("{} trailing bytes after the last substream", bytes.len() - pos)));
        }
        Ok(Bitstream { header, streams })
    }

    /// Total container size in bytes.
    pub fn len(&self) -> usize {
        HEADER_LEN + self.streams.iter().map(|s| 4 + s.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}
