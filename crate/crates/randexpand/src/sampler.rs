//! Input sampling: q-biased input pairs drawn from a bit source through a
//! Knuth–Yao DDG tree, with exact bit-consumption accounting, plus an
//! amortized batch mode (range decoding) whose per-sample cost approaches
//! the source entropy for long sequences.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::bell::{BellError, InputDistribution, Rational};

/// DDG trees are truncated at this depth; the truncation bias per outcome
/// is at most 2^{−64}. Exactly dyadic probabilities incur zero bias.
pub const D_MAX: u32 = 64;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("q = {0} outside (0, 1/4]")]
    QOutOfRange(f64),
    #[error("bit source exhausted after {consumed} bits ({completed} samples completed)")]
    SourceExhausted { consumed: u64, completed: usize },
    #[error(transparent)]
    Bell(#[from] BellError),
}

/// A stream of bits with an exact monotone consumption counter. Sources
/// never recycle bits; running out is an error the caller must handle.
#[derive(Debug, Clone)]
pub struct BitSource {
    inner: Inner,
    consumed: u64,
}

#[derive(Debug, Clone)]
enum Inner {
    /// Deterministic generator; never exhausts.
    Seeded { rng: ChaCha12Rng, buf: u64, left: u32 },
    /// Fixed bits, read MSB-first within each byte.
    Bytes { data: Vec<u8>, len_bits: u64 },
}

impl BitSource {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: Inner::Seeded { rng: ChaCha12Rng::seed_from_u64(seed), buf: 0, left: 0 },
            consumed: 0,
        }
    }

    pub fn from_bytes(data: Vec<u8>) -> Self {
        let len_bits = data.len() as u64 * 8;
        Self::from_bytes_with_len(data, len_bits)
    }

    /// A source over the first `len_bits` bits of `data` (MSB-first); used
    /// when the tail of the final byte is padding.
    pub fn from_bytes_with_len(data: Vec<u8>, len_bits: u64) -> Self {
        debug_assert!(len_bits <= data.len() as u64 * 8);
        Self { inner: Inner::Bytes { data, len_bits }, consumed: 0 }
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    /// Bits remaining, if the source is finite.
    pub fn remaining(&self) -> Option<u64> {
        match &self.inner {
            Inner::Seeded { .. } => None,
            Inner::Bytes { len_bits, .. } => Some(len_bits - self.consumed),
        }
    }

    pub fn next_bit(&mut self) -> Result<u8, SamplerError> {
        let bit = match &mut self.inner {
            Inner::Seeded { rng, buf, left } => {
                if *left == 0 {
                    *buf = rng.next_u64();
                    *left = 64;
                }
                *left -= 1;
                ((*buf >> *left) & 1) as u8
            }
            Inner::Bytes { data, len_bits } => {
                if self.consumed >= *len_bits {
                    return Err(SamplerError::SourceExhausted {
                        consumed: self.consumed,
                        completed: 0,
                    });
                }
                let idx = (self.consumed / 8) as usize;
                let off = (self.consumed % 8) as u32;
                (data[idx] >> (7 - off)) & 1
            }
        };
        self.consumed += 1;
        Ok(bit)
    }
}

/// The input distribution P(0,0) = 1 − 3q, P(x,y) = q otherwise, held as an
/// exact rational so transcript headers and p_min are reproducible bit for bit.
#[derive(Debug, Clone)]
pub struct QBiasedDistribution {
    pub q: Rational,
    /// Probabilities over (0,0), (0,1), (1,0), (1,1) in 2^64 fixed point,
    /// summing to 2^64 exactly (the (0,0) entry absorbs rounding).
    scaled: [u64; 4],
    tree: DdgTree,
}

/// The q-biased input distribution; requires 0 < q ≤ 1/4.
pub fn q_biased(q: Rational) -> Result<QBiasedDistribution, SamplerError> {
    let qf = q.to_f64();
    if !(qf > 0.0 && q.num * 4 <= q.den) {
        return Err(SamplerError::QOutOfRange(qf));
    }
    // q in 2^64 fixed point, rounded to nearest
    let q_scaled = (((q.num as u128) << 64) + (q.den as u128) / 2) / q.den as u128;
    let q_scaled = q_scaled as u64;
    let top = (0u64.wrapping_sub(q_scaled)).wrapping_sub(q_scaled).wrapping_sub(q_scaled);
    let scaled = [top, q_scaled, q_scaled, q_scaled];
    let tree = DdgTree::build(&scaled);
    Ok(QBiasedDistribution { q, scaled, tree })
}

impl QBiasedDistribution {
    pub fn p_min(&self) -> f64 {
        self.q.to_f64()
    }

    /// The table as exact probabilities: (1−3q, q, q, q).
    pub fn to_input_distribution(&self) -> InputDistribution {
        let top = Rational::new(self.q.den - 3 * self.q.num, self.q.den);
        InputDistribution::new(2, 2, vec![top, self.q, self.q, self.q]).unwrap()
    }

    /// Shannon entropy of the table in bits.
    pub fn entropy(&self) -> f64 {
        let q = self.q.to_f64();
        let top = 1.0 - 3.0 * q;
        let h = |p: f64| if p > 0.0 { -p * p.log2() } else { 0.0 };
        h(top) + 3.0 * h(q)
    }
}

/// A discrete distribution generating tree: outcome k holds one leaf at
/// depth d for every set bit d of its fixed-point probability. Leaves on a
/// level are ordered by outcome index, making the walk fully deterministic.
#[derive(Debug, Clone)]
struct DdgTree {
    /// leaves[d] = outcome labels of the leaves at depth d+1
    leaves: Vec<Vec<u8>>,
}

impl DdgTree {
    fn build(scaled: &[u64; 4]) -> Self {
        let mut leaves = vec![Vec::new(); D_MAX as usize];
        for d in 1..=D_MAX {
            for (k, &p) in scaled.iter().enumerate() {
                if (p >> (D_MAX - d)) & 1 == 1 {
                    leaves[d as usize - 1].push(k as u8);
                }
            }
        }
        DdgTree { leaves }
    }

    /// Exact expected walk depth Σ_d d·L_d·2^{−d}.
    fn expected_depth(&self) -> f64 {
        self.leaves
            .iter()
            .enumerate()
            .map(|(i, l)| (i as f64 + 1.0) * l.len() as f64 * 2f64.powi(-(i as i32 + 1)))
            .sum()
    }
}

/// One Knuth–Yao draw: walks the DDG tree, consuming one bit per level.
pub fn ky_sample(
    d: &QBiasedDistribution,
    src: &mut BitSource,
) -> Result<(usize, usize), SamplerError> {
    let mut u: u64 = 0;
    for level in &d.tree.leaves {
        u = 2 * u + src.next_bit()? as u64;
        let l = level.len() as u64;
        if u < l {
            let k = level[u as usize] as usize;
            return Ok((k / 2, k % 2));
        }
        u -= l;
    }
    // Unreachable for a full-mass tree: Σ L_d 2^{−d} = 1 means every
    // 64-bit walk terminates. Kept as a defensive error path.
    Err(SamplerError::SourceExhausted { consumed: src.consumed(), completed: 0 })
}

/// Exact expected bits per draw of the constructed tree.
pub fn expected_bits(d: &QBiasedDistribution) -> f64 {
    d.tree.expected_depth()
}

/// The result of sampling a full input sequence.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub inputs: Vec<(usize, usize)>,
    pub bits_consumed: u64,
    /// Deepest single-draw consumption observed (bits); in amortized mode
    /// this is the largest per-sample increment including renormalization.
    pub worst_depth: u64,
}

/// Draws n iid inputs with one independent tree walk per sample.
pub fn sample_inputs(
    n: usize,
    d: &QBiasedDistribution,
    src: &mut BitSource,
) -> Result<SampleRun, SamplerError> {
    assert!(n >= 1, "sample_inputs requires n >= 1");
    let start = src.consumed();
    let mut inputs = Vec::with_capacity(n);
    let mut worst = 0u64;
    for completed in 0..n {
        let before = src.consumed();
        let xy = ky_sample(d, src).map_err(|e| match e {
            SamplerError::SourceExhausted { consumed, .. } => {
                SamplerError::SourceExhausted { consumed: consumed - start, completed }
            }
            other => other,
        })?;
        worst = worst.max(src.consumed() - before);
        inputs.push(xy);
    }
    Ok(SampleRun { inputs, bits_consumed: src.consumed() - start, worst_depth: worst })
}

/// Draws n iid inputs with a binary range decoder sharing one 64-bit state
/// across the whole sequence: total consumption approaches n·H(q) + 64 bits,
/// dropping below one bit per sample for strongly biased q. The decoded
/// distribution matches the table to within 2^{−24} per symbol.
pub fn sample_inputs_amortized(
    n: usize,
    d: &QBiasedDistribution,
    src: &mut BitSource,
) -> Result<SampleRun, SamplerError> {
    assert!(n >= 1, "sample_inputs_amortized requires n >= 1");
    let start = src.consumed();
    // 32-bit cumulative table from the 64-bit fixed-point probabilities
    let mut p32 = [0u64; 4];
    let mut acc = 0u64;
    for k in 0..4 {
        p32[k] = (d.scaled[k] >> 32).max(1);
        acc += p32[k];
    }
    p32[0] = p32[0] + (1u64 << 32) - acc; // absorb rounding into (0,0)
    let mut cum = [0u64; 5];
    for k in 0..4 {
        cum[k + 1] = cum[k] + p32[k];
    }

    let exhaust = |src: &BitSource, completed: usize| SamplerError::SourceExhausted {
        consumed: src.consumed() - start,
        completed,
    };
    let mut code: u64 = 0;
    for _ in 0..64 {
        code = (code << 1) | src.next_bit().map_err(|_| exhaust(src, 0))? as u64;
    }
    let mut range: u64 = u64::MAX;
    let mut inputs = Vec::with_capacity(n);
    let mut worst = 0u64;
    for completed in 0..n {
        let before = src.consumed();
        let t = range >> 32;
        let v = (code / t).min((1u64 << 32) - 1);
        let k = cum.iter().take(4).rposition(|&c| c <= v).unwrap();
        code -= t * cum[k];
        // the top symbol absorbs the division residue so code < range is
        // an invariant; renormalizing at 2^56 keeps t ≥ 2^24 and thus the
        // per-symbol truncation bias below 2^{−24}
        range = if k == 3 { range - t * cum[3] } else { t * p32[k] };
        while range < (1u64 << 56) {
            range <<= 1;
            code = (code << 1) | src.next_bit().map_err(|_| exhaust(src, completed))? as u64;
        }
        worst = worst.max(src.consumed() - before);
        inputs.push(((k / 2), (k % 2)));
    }
    Ok(SampleRun { inputs, bits_consumed: src.consumed() - start, worst_depth: worst })
}
