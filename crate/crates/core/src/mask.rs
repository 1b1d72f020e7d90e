//! Dense attention masks and the atomic/compound pattern generators.
//!
//! A [`DenseMask`] is the ground truth every other representation is checked
//! against. Cell `(i, j)` is `true` when query `i` may attend to key `j`.
//!
//! Random patterns draw from SplitMix64 (state initialised to the seed, the
//! standard Vigna/Steele formulation). Tiles are visited in row-major order and
//! each tile consumes exactly one 64-bit draw `x`; the tile is filled when
//! `(x >> 11) * 2^-53 < filling_rate`. Any implementation following that recipe
//! reproduces the masks bit for bit.

use std::io::{Read, Write};

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::bits::{pack_bits, unpack_bits};
use crate::error::{Error, Result};

pub const DENSE_MAGIC: &[u8; 4] = b"SFMK";
pub const DENSE_VERSION: u32 = 1;

/// Default tile edge used for random attention blocks.
pub const DEFAULT_RANDOM_BLOCK: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DenseMask {
    seq_len: usize,
    bits: Vec<bool>,
}

impl DenseMask {
    pub fn new(seq_len: usize, value: bool) -> Self {
        Self {
            seq_len,
            bits: vec![value; seq_len * seq_len],
        }
    }

    pub fn all_true(seq_len: usize) -> Self {
        Self::new(seq_len, true)
    }

    pub fn all_false(seq_len: usize) -> Self {
        Self::new(seq_len, false)
    }

    pub fn from_fn(seq_len: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(seq_len * seq_len);
        for i in 0..seq_len {
            for j in 0..seq_len {
                bits.push(f(i, j));
            }
        }
        Self { seq_len, bits }
    }

    pub fn from_bits(seq_len: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != seq_len * seq_len {
            return Err(Error::Shape(format!(
                "expected {} bits for seq_len {seq_len}, got {}",
                seq_len * seq_len,
                bits.len()
            )));
        }
        Ok(Self { seq_len, bits })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.seq_len + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.seq_len + j] = value;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of masked-out cells, `1 - true / seq_len²`.
    pub fn sparsity(&self) -> f64 {
        if self.seq_len == 0 {
            return 1.0;
        }
        1.0 - self.count_true() as f64 / (self.seq_len * self.seq_len) as f64
    }

    pub fn union_with(&mut self, other: &DenseMask) -> Result<()> {
        if other.seq_len != self.seq_len {
            return Err(Error::Shape(format!(
                "cannot compose masks of seq_len {} and {}",
                self.seq_len, other.seq_len
            )));
        }
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// Writes the dense dump: a 16-byte header (`SFMK`, u32 version, u64
    /// seq_len, all little-endian) followed by the row-major cells packed
    /// LSB-first into bytes.
    pub fn write_dense<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DENSE_MAGIC)?;
        w.write_all(&DENSE_VERSION.to_le_bytes())?;
        w.write_all(&(self.seq_len as u64).to_le_bytes())?;
        w.write_all(&pack_bits(&self.bits))?;
        Ok(())
    }

    pub fn read_dense<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..4] != DENSE_MAGIC {
            return Err(Error::Format("bad dense mask magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != DENSE_VERSION {
            return Err(Error::Format(format!(
                "unsupported dense mask version {version}"
            )));
        }
        let seq_len = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let n = seq_len * seq_len;
        let mut payload = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut payload)?;
        Ok(Self {
            seq_len,
            bits: unpack_bits(&payload, n),
        })
    }
}

fn check_seq_len(seq_len: usize) -> Result<()> {
    if seq_len == 0 {
        return Err(Error::InvalidParameter("seq_len must be positive".into()));
    }
    Ok(())
}

/// `true` where `|i - j| < band_width`.
pub fn gen_sliding_window(seq_len: usize, band_width: usize) -> Result<DenseMask> {
    check_seq_len(seq_len)?;
    if band_width == 0 || band_width > seq_len {
        return Err(Error::InvalidParameter(format!(
            "band_width {band_width} must lie in [1, {seq_len}]"
        )));
    }
    Ok(DenseMask::from_fn(seq_len, |i, j| {
        i.abs_diff(j) < band_width
    }))
}

/// Sliding window with every `dilation_rate` positions skipped between kept
/// diagonals: `|i - j| < band·(d+1)` and `(i - j) mod (d+1) == 0`.
pub fn gen_dilated(seq_len: usize, band_width: usize, dilation_rate: usize) -> Result<DenseMask> {
    check_seq_len(seq_len)?;
    if band_width == 0 || band_width > seq_len {
        return Err(Error::InvalidParameter(format!(
            "band_width {band_width} must lie in [1, {seq_len}]"
        )));
    }
    let stride = dilation_rate + 1;
    let reach = band_width.saturating_mul(stride);
    Ok(DenseMask::from_fn(seq_len, |i, j| {
        let d = i.abs_diff(j);
        d < reach && d % stride == 0
    }))
}

/// The first `global_width` tokens attend everywhere and are attended by all.
pub fn gen_global(seq_len: usize, global_width: usize) -> Result<DenseMask> {
    check_seq_len(seq_len)?;
    if global_width > seq_len {
        return Err(Error::InvalidParameter(format!(
            "global_width {global_width} exceeds seq_len {seq_len}"
        )));
    }
    Ok(DenseMask::from_fn(seq_len, |i, j| {
        i < global_width || j < global_width
    }))
}

pub fn gen_random_blocks(
    seq_len: usize,
    block: usize,
    filling_rate: f64,
    seed: u64,
) -> Result<DenseMask> {
    check_seq_len(seq_len)?;
    if block == 0 {
        return Err(Error::InvalidParameter(
            "random block size must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&filling_rate) {
        return Err(Error::InvalidParameter(format!(
            "filling_rate {filling_rate} outside [0, 1]"
        )));
    }
    let tiles = seq_len.div_ceil(block);
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut mask = DenseMask::all_false(seq_len);
    for ti in 0..tiles {
        for tj in 0..tiles {
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u < filling_rate {
                for i in ti * block..((ti + 1) * block).min(seq_len) {
                    for j in tj * block..((tj + 1) * block).min(seq_len) {
                        mask.set(i, j, true);
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Element-wise union of masks sharing one `seq_len`.
pub fn compose(masks: &[DenseMask]) -> Result<DenseMask> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| Error::InvalidParameter("compose needs at least one mask".into()))?;
    let mut out = first.clone();
    for m in rest {
        out.union_with(m)?;
    }
    Ok(out)
}

pub fn gen_longformer(seq_len: usize, global_width: usize, band_width: usize) -> Result<DenseMask> {
    compose(&[
        gen_global(seq_len, global_width)?,
        gen_sliding_window(seq_len, band_width)?,
    ])
}

pub fn gen_bigbird(
    seq_len: usize,
    global_width: usize,
    band_width: usize,
    filling_rate: f64,
    seed: u64,
) -> Result<DenseMask> {
    gen_bigbird_with_block(
        seq_len,
        global_width,
        band_width,
        filling_rate,
        DEFAULT_RANDOM_BLOCK,
        seed,
    )
}

pub fn gen_bigbird_with_block(
    seq_len: usize,
    global_width: usize,
    band_width: usize,
    filling_rate: f64,
    block: usize,
    seed: u64,
) -> Result<DenseMask> {
    compose(&[
        gen_global(seq_len, global_width)?,
        gen_sliding_window(seq_len, band_width)?,
        gen_random_blocks(seq_len, block, filling_rate, seed)?,
    ])
}

pub fn sparsity(mask: &DenseMask) -> f64 {
    mask.sparsity()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    SlidingWindow,
    Dilated,
    Global,
    RandomBlocks,
    Longformer,
    Bigbird,
    Full,
    Empty,
}

impl PatternKind {
    pub const ALL: [PatternKind; 8] = [
        PatternKind::SlidingWindow,
        PatternKind::Dilated,
        PatternKind::Global,
        PatternKind::RandomBlocks,
        PatternKind::Longformer,
        PatternKind::Bigbird,
        PatternKind::Full,
        PatternKind::Empty,
    ];
}

impl std::str::FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sliding" | "sliding_window" | "sliding-window" => PatternKind::SlidingWindow,
            "dilated" => PatternKind::Dilated,
            "global" => PatternKind::Global,
            "random" | "random_blocks" | "random-blocks" => PatternKind::RandomBlocks,
            "longformer" => PatternKind::Longformer,
            "bigbird" => PatternKind::Bigbird,
            "full" => PatternKind::Full,
            "empty" => PatternKind::Empty,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown pattern `{other}`"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternParams {
    pub band_width: usize,
    pub global_width: usize,
    pub dilation_rate: usize,
    pub filling_rate: f64,
    pub block: usize,
    pub seed: u64,
}

impl Default for PatternParams {
    fn default() -> Self {
        Self {
            band_width: 32,
            global_width: 32,
            dilation_rate: 1,
            filling_rate: 0.1,
            block: DEFAULT_RANDOM_BLOCK,
            seed: 0,
        }
    }
}

/// JSON-serialisable recipe for a mask; `build` is a pure function of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskDescriptor {
    pub pattern: PatternKind,
    pub seq_len: usize,
    #[serde(flatten)]
    pub params: PatternParams,
}

impl MaskDescriptor {
    pub fn new(pattern: PatternKind, seq_len: usize, params: PatternParams) -> Self {
        Self {
            pattern,
            seq_len,
            params,
        }
    }

    pub fn build(&self) -> Result<DenseMask> {
        let p = &self.params;
        let s = self.seq_len;
        match self.pattern {
            PatternKind::SlidingWindow => gen_sliding_window(s, p.band_width),
            PatternKind::Dilated => gen_dilated(s, p.band_width, p.dilation_rate),
            PatternKind::Global => gen_global(s, p.global_width),
            PatternKind::RandomBlocks => gen_random_blocks(s, p.block, p.filling_rate, p.seed),
            PatternKind::Longformer => gen_longformer(s, p.global_width, p.band_width),
            PatternKind::Bigbird => gen_bigbird_with_block(
                s,
                p.global_width,
                p.band_width,
                p.filling_rate,
                p.block,
                p.seed,
            ),
            PatternKind::Full => {
                check_seq_len(s)?;
                Ok(DenseMask::all_true(s))
            }
            PatternKind::Empty => {
                check_seq_len(s)?;
                Ok(DenseMask::all_false(s))
            }
        }
    }
}
