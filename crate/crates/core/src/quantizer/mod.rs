//! Element-wise trainable quantization with variable-rate downsampling.
//!
//! Each feature `z_i` is compared against `K = 2^b_max - 1` ordered
//! boundaries. The comparator output is a ternary vector: `+1` for every
//! boundary at or below `z_i`, `-1` above, and `0` for entries that a
//! reduced-rate observer cannot infer. At `B_i` bits only every
//! `α_i = 2^(b_max - B_i)`-th boundary is observed; the monotone ordering
//! restores everything except the `α_i - 1` entries directly above the last
//! observed `+1`, which are set to zero.
//!
//! The decoder sums the ternary vector into a level (`level_sum`). Levels
//! reachable at different rates form disjoint sets ([`class_set`]), so the
//! level itself tells the decoder at which rate a feature was sent.

mod bits;
mod surrogate;

use std::collections::BTreeSet;

pub use bits::{pack_bits, unpack_bits, BitstreamFileError, CsiBitstream};
pub use surrogate::{critical_entries, materialize_op, quantize_op, surrogate_backward, SurrogateGrads};

use crate::diffcore::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QuantError {
    #[error("total bits {total} outside [{min}, {max}] for {features} features")]
    RateOutOfRange {
        total: usize,
        min: usize,
        max: usize,
        features: usize,
    },
    #[error("feature bits {bits} outside [1, {b_max}]")]
    BitsOutOfRange { bits: u32, b_max: u32 },
    #[error("level vector is not a valid monotone pattern at {bits} bits")]
    MalformedLevels { bits: u32 },
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
}

/// Number of boundaries per feature at resolution `b_max`.
pub fn levels_per_feature(b_max: u32) -> usize {
    (1usize << b_max) - 1
}

/// Downsampling factor `2^(b_max - bits)`.
pub fn alpha(bits: u32, b_max: u32) -> usize {
    1usize << (b_max - bits)
}

/// Trainable boundary parameters: a first boundary plus `K - 1`
/// pseudo-intervals per feature. Intervals pass through a rectifier before
/// accumulation so materialized boundaries never decrease.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerParams {
    pub b_max: u32,
    /// `[N]`
    pub first: Tensor,
    /// `[N, K - 1]`
    pub pseudo: Tensor,
}

impl QuantizerParams {
    pub fn new(b_max: u32, first: Tensor, pseudo: Tensor) -> Result<Self, QuantError> {
        let k = levels_per_feature(b_max);
        let n = first.len();
        if pseudo.len() != n * (k - 1) {
            return Err(QuantError::Length {
                expected: n * (k - 1),
                got: pseudo.len(),
            });
        }
        Ok(Self { b_max, first, pseudo })
    }

    /// Evenly spaced boundaries with spacing `delta[i]`, centered on zero.
    pub fn uniform(b_max: u32, delta: &[f64]) -> Self {
        let k = levels_per_feature(b_max);
        let half = (k - 1) as f64 / 2.0;
        let first = delta.iter().map(|d| -half * d).collect();
        let pseudo = delta.iter().flat_map(|&d| std::iter::repeat_n(d, k - 1)).collect();
        Self {
            b_max,
            first: Tensor::vector(first),
            pseudo: Tensor::new(vec![delta.len(), k - 1], pseudo).expect("consistent"),
        }
    }

    pub fn features(&self) -> usize {
        self.first.len()
    }

    /// Scalar parameter count, `N (2^b_max - 1)`.
    pub fn param_count(&self) -> usize {
        self.first.len() + self.pseudo.len()
    }

    pub fn materialize_boundaries(&self) -> BoundaryGrid {
        let k = levels_per_feature(self.b_max);
        let mut values = Vec::with_capacity(self.features() * k);
        for (i, &b1) in self.first.data().iter().enumerate() {
            let mut acc = b1;
            values.push(acc);
            for &beta in &self.pseudo.data()[i * (k - 1)..(i + 1) * (k - 1)] {
                acc += beta.max(0.0);
                values.push(acc);
            }
        }
        BoundaryGrid { k, values }
    }
}

/// Materialized boundaries, `N` rows of `K` non-decreasing values.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryGrid {
    k: usize,
    values: Vec<f64>,
}

impl BoundaryGrid {
    pub fn from_rows(k: usize, values: Vec<f64>) -> Result<Self, QuantError> {
        if k == 0 || !values.len().is_multiple_of(k) {
            return Err(QuantError::Length {
                expected: k,
                got: values.len(),
            });
        }
        Ok(Self { k, values })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.k
    }

    pub fn per_feature(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Per-feature bit budget for a stream of `total` bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitAllocation {
    pub b_max: u32,
    pub bits: Vec<u32>,
}

impl BitAllocation {
    pub fn total(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn features(&self) -> usize {
        self.bits.len()
    }

    pub fn alpha(&self, i: usize) -> usize {
        alpha(self.bits[i], self.b_max)
    }
}

/// Spreads `total` bits over `n` features: the first `total mod n` features
/// get one bit more than the rest.
pub fn allocate_bits(total: usize, n: usize, b_max: u32) -> Result<BitAllocation, QuantError> {
    let max = n * b_max as usize;
    if n == 0 || total < n || total > max {
        return Err(QuantError::RateOutOfRange {
            total,
            min: n,
            max,
            features: n,
        });
    }
    let base = (total / n) as u32;
    let extra = total % n;
    let bits = (0..n).map(|i| if i < extra { base + 1 } else { base }).collect();
    Ok(BitAllocation { b_max, bits })
}

/// Comparator output over all `K` boundaries after rate downsampling.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TernaryLevelVector(pub Vec<i8>);

impl TernaryLevelVector {
    pub fn entries(&self) -> &[i8] {
        &self.0
    }

    pub fn level_sum(&self) -> i64 {
        self.0.iter().map(|&v| v as i64).sum()
    }

    /// Checks the `+1… 0… -1…` pattern with exactly `α - 1` zeros (or none
    /// at full rate) placed right after a multiple of `α`.
    pub fn is_valid_at(&self, bits: u32, b_max: u32) -> bool {
        if self.0.len() != levels_per_feature(b_max) || bits == 0 || bits > b_max {
            return false;
        }
        let a = alpha(bits, b_max);
        let plus = self.0.iter().take_while(|&&v| v == 1).count();
        if plus % a != 0 {
            return false;
        }
        let zeros = self.0[plus..].iter().take_while(|&&v| v == 0).count();
        if zeros != a - 1 {
            return false;
        }
        self.0[plus + zeros..].iter().all(|&v| v == -1)
    }
}

/// Comparator signs at every boundary (`+1` iff `z >= b`), observed at
/// `bits` bits and interpolated.
pub fn quantize_levels(z: f64, boundaries: &[f64], bits: u32, b_max: u32) -> TernaryLevelVector {
    let a = alpha(bits, b_max);
    let observed = (1usize << bits) - 1;
    // number of observed boundaries at or below z
    let m = (1..=observed).take_while(|&j| z >= boundaries[j * a - 1]).count();
    levels_from_count(m, a, boundaries.len())
}

pub(crate) fn levels_from_count(m: usize, a: usize, k: usize) -> TernaryLevelVector {
    let mut v = vec![-1i8; k];
    for (idx, e) in v.iter_mut().enumerate() {
        let pos = idx + 1;
        if pos <= m * a {
            *e = 1;
        } else if pos < m * a + a {
            *e = 0;
        }
    }
    TernaryLevelVector(v)
}

/// Feature-space demapping: each feature becomes the sum of its entries.
pub fn level_sum(levels: &[TernaryLevelVector]) -> Vec<f64> {
    levels.iter().map(|l| l.level_sum() as f64).collect()
}

/// Level sums reachable at `bits` bits.
pub fn class_set(bits: u32, b_max: u32) -> BTreeSet<i64> {
    let a = alpha(bits, b_max) as i64;
    let count = 1i64 << b_max;
    // 2a·floor((n - (2^b_max - 1)/2) / a) + a, in integer arithmetic on 2n
    (0..count)
        .map(|n| {
            let numer = 2 * n - (count - 1);
            let q = numer.div_euclid(2 * a);
            2 * a * q + a
        })
        .collect()
}
