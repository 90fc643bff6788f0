use std::path::Path;

use crate::wire::{Reader, WireError, Writer};

use super::{
    allocate_bits, alpha, levels_from_count, levels_per_feature, BitAllocation, QuantError, TernaryLevelVector,
};

/// `bits`-bit MSB-first binary code of the number of observed `+1` entries.
pub fn pack_bits(levels: &TernaryLevelVector, bits: u32) -> Result<Vec<u8>, QuantError> {
    let k = levels.0.len();
    let b_max = (k + 1).trailing_zeros();
    if (1usize << b_max) != k + 1 || bits == 0 || bits > b_max {
        return Err(QuantError::BitsOutOfRange { bits, b_max });
    }
    if !levels.is_valid_at(bits, b_max) {
        return Err(QuantError::MalformedLevels { bits });
    }
    let a = alpha(bits, b_max);
    let count = (1..(1usize << bits)).filter(|j| levels.0[j * a - 1] == 1).count();
    Ok((0..bits).rev().map(|s| ((count >> s) & 1) as u8).collect())
}

/// Inverse of [`pack_bits`]: rebuilds the interpolated level vector from a
/// code of `code.len()` bits.
pub fn unpack_bits(code: &[u8], b_max: u32) -> Result<TernaryLevelVector, QuantError> {
    let bits = code.len() as u32;
    if bits == 0 || bits > b_max {
        return Err(QuantError::BitsOutOfRange { bits, b_max });
    }
    let m = code.iter().fold(0usize, |acc, &b| (acc << 1) | (b & 1) as usize);
    Ok(levels_from_count(m, alpha(bits, b_max), levels_per_feature(b_max)))
}

/// Packed feedback: per-feature codes concatenated in feature order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsiBitstream {
    bits: Vec<u8>,
    allocation: BitAllocation,
}

impl CsiBitstream {
    pub fn from_levels(levels: &[TernaryLevelVector], allocation: BitAllocation) -> Result<Self, QuantError> {
        if levels.len() != allocation.features() {
            return Err(QuantError::Length {
                expected: allocation.features(),
                got: levels.len(),
            });
        }
        let mut bits = Vec::with_capacity(allocation.total());
        for (l, &b) in levels.iter().zip(&allocation.bits) {
            bits.extend(pack_bits(l, b)?);
        }
        Ok(Self { bits, allocation })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn allocation(&self) -> &BitAllocation {
        &self.allocation
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Per-feature level vectors recovered from the stream.
    pub fn levels(&self) -> Vec<TernaryLevelVector> {
        let mut out = Vec::with_capacity(self.allocation.features());
        let mut at = 0;
        for &b in &self.allocation.bits {
            let code = &self.bits[at..at + b as usize];
            out.push(unpack_bits(code, self.allocation.b_max).expect("allocation bits within range"));
            at += b as usize;
        }
        out
    }

    /// Bits packed big-endian into bytes, tail padded with zeros.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            out[i / 8] |= (b & 1) << (7 - i % 8);
        }
        out
    }

    /// Parses `total` bits; the allocation is re-derived from
    /// `(total, features, b_max)` exactly as the encoder derived it.
    pub fn from_bytes(bytes: &[u8], total: usize, features: usize, b_max: u32) -> Result<Self, QuantError> {
        let allocation = allocate_bits(total, features, b_max)?;
        if bytes.len() != total.div_ceil(8) {
            return Err(QuantError::Length {
                expected: total.div_ceil(8),
                got: bytes.len(),
            });
        }
        let bits = (0..total).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect();
        Ok(Self { bits, allocation })
    }
}

const FILE_MAGIC: &str = "CSIB";
const FILE_VERSION: u32 = 1;

impl CsiBitstream {
    /// File form: `"CSIB"`, u32 version, u32 total bits, u32 features,
    /// u32 b_max, then the packed bytes.
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(FILE_MAGIC.as_bytes());
        w.u32(FILE_VERSION);
        w.u32(self.len() as u32);
        w.u32(self.allocation.features() as u32);
        w.u32(self.allocation.b_max);
        w.bytes(&self.to_bytes());
        w.finish()
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self, BitstreamFileError> {
        let mut r = Reader::new(bytes);
        r.magic(FILE_MAGIC)?;
        r.version(FILE_VERSION)?;
        let total = r.u32()? as usize;
        let features = r.u32()? as usize;
        let b_max = r.u32()?;
        let packed = r.take(total.div_ceil(8))?;
        r.expect_end()?;
        Ok(Self::from_bytes(packed, total, features, b_max)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_file_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BitstreamFileError> {
        Self::from_file_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BitstreamFileError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
