//! Dual full/part block-compressed-sparse-row storage for attention masks.
//!
//! Every `block_m × block_n` tile of the mask (edge tiles padded with masked-out
//! cells) is classified as
//!
//! * **full**: every cell valid, computed densely without a mask lookup;
//! * **part**: mixed, its bit pattern interned once in `part_mask_pool` and
//!   referenced from `part_tile_ids`;
//! * **empty**: absent from every array, never loaded.
//!
//! `load_row_ptr`/`load_col_idx` index the union of full and part tiles, which
//! is exactly the set an executor has to visit.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::bits::{pack_bits, unpack_bits};
use crate::error::{Error, Result};
use crate::mask::DenseMask;

pub const BSR_MAGIC: &[u8; 4] = b"SFBR";
pub const BSR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileClass {
    Full,
    Part(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BsrMask {
    pub seq_len: usize,
    pub block_m: usize,
    pub block_n: usize,
    pub full_row_ptr: Vec<usize>,
    pub full_col_idx: Vec<usize>,
    pub part_row_ptr: Vec<usize>,
    pub part_col_idx: Vec<usize>,
    pub part_tile_ids: Vec<usize>,
    /// Row-major `block_m × block_n` tiles, pairwise distinct.
    pub part_mask_pool: Vec<Vec<bool>>,
    pub load_row_ptr: Vec<usize>,
    pub load_col_idx: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub block_m: usize,
    pub block_n: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub full_count: usize,
    pub part_count: usize,
    pub empty_count: usize,
    pub pool_size: usize,
    pub valid_block_ratio: f64,
}

pub fn build_bsr(mask: &DenseMask, block_m: usize, block_n: usize) -> Result<BsrMask> {
    if block_m == 0 || block_n == 0 {
        return Err(Error::InvalidParameter(format!(
            "block sizes must be positive, got {block_m}x{block_n}"
        )));
    }
    let seq_len = mask.seq_len();
    let n_rows = seq_len.div_ceil(block_m);
    let n_cols = seq_len.div_ceil(block_n);
    let area = block_m * block_n;

    let mut full_row_ptr = Vec::with_capacity(n_rows + 1);
    let mut part_row_ptr = Vec::with_capacity(n_rows + 1);
    let mut load_row_ptr = Vec::with_capacity(n_rows + 1);
    full_row_ptr.push(0);
    part_row_ptr.push(0);
    load_row_ptr.push(0);
    let mut full_col_idx = Vec::new();
    let mut part_col_idx = Vec::new();
    let mut part_tile_ids = Vec::new();
    let mut load_col_idx = Vec::new();
    let mut pool: Vec<Vec<bool>> = Vec::new();
    let mut interned: HashMap<Vec<u8>, usize> = HashMap::new();

    let mut tile = vec![false; area];
    for bi in 0..n_rows {
        for bj in 0..n_cols {
            let mut count = 0;
            for r in 0..block_m {
                let i = bi * block_m + r;
                for c in 0..block_n {
                    let j = bj * block_n + c;
                    let v = i < seq_len && j < seq_len && mask.get(i, j);
                    tile[r * block_n + c] = v;
                    count += v as usize;
                }
            }
            if count == 0 {
                continue;
            }
            load_col_idx.push(bj);
            if count == area {
                full_col_idx.push(bj);
            } else {
                let key = pack_bits(&tile);
                let id = *interned.entry(key).or_insert_with(|| {
                    pool.push(tile.clone());
                    pool.len() - 1
                });
                part_col_idx.push(bj);
                part_tile_ids.push(id);
            }
        }
        full_row_ptr.push(full_col_idx.len());
        part_row_ptr.push(part_col_idx.len());
        load_row_ptr.push(load_col_idx.len());
    }

    Ok(BsrMask {
        seq_len,
        block_m,
        block_n,
        full_row_ptr,
        full_col_idx,
        part_row_ptr,
        part_col_idx,
        part_tile_ids,
        part_mask_pool: pool,
        load_row_ptr,
        load_col_idx,
    })
}

fn check_row_array(
    name: &str,
    ptr: &[usize],
    cols: &[usize],
    n_rows: usize,
    n_cols: usize,
) -> Result<()> {
    if ptr.len() != n_rows + 1 {
        return Err(Error::Inconsistent(format!(
            "{name}_row_ptr has length {}, expected {}",
            ptr.len(),
            n_rows + 1
        )));
    }
    if ptr[0] != 0 || ptr.windows(2).any(|w| w[0] > w[1]) || ptr[n_rows] != cols.len() {
        return Err(Error::Inconsistent(format!(
            "{name}_row_ptr is not a valid CSR pointer"
        )));
    }
    for i in 0..n_rows {
        let row = &cols[ptr[i]..ptr[i + 1]];
        if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&c| c >= n_cols) {
            return Err(Error::Inconsistent(format!(
                "{name}_col_idx row {i} is unsorted or out of range"
            )));
        }
    }
    Ok(())
}

impl BsrMask {
    pub fn n_rows(&self) -> usize {
        self.seq_len.div_ceil(self.block_m)
    }

    pub fn n_cols(&self) -> usize {
        self.seq_len.div_ceil(self.block_n)
    }

    pub fn full_cols(&self, row: usize) -> &[usize] {
        &self.full_col_idx[self.full_row_ptr[row]..self.full_row_ptr[row + 1]]
    }

    pub fn part_cols(&self, row: usize) -> &[usize] {
        &self.part_col_idx[self.part_row_ptr[row]..self.part_row_ptr[row + 1]]
    }

    pub fn load_cols(&self, row: usize) -> &[usize] {
        &self.load_col_idx[self.load_row_ptr[row]..self.load_row_ptr[row + 1]]
    }

    pub fn valid_count(&self) -> usize {
        *self.load_row_ptr.last().unwrap_or(&0)
    }

    /// Full/part discriminator for a loaded tile, found by membership lookup.
    pub fn classify(&self, row: usize, col: usize) -> Option<TileClass> {
        if self.full_cols(row).binary_search(&col).is_ok() {
            return Some(TileClass::Full);
        }
        let start = self.part_row_ptr[row];
        self.part_cols(row)
            .binary_search(&col)
            .ok()
            .map(|k| TileClass::Part(self.part_tile_ids[start + k]))
    }

    /// Checks every structural invariant of the format.
    pub fn validate(&self) -> Result<()> {
        if self.block_m == 0 || self.block_n == 0 {
            return Err(Error::Inconsistent("zero block size".into()));
        }
        let (n_rows, n_cols) = (self.n_rows(), self.n_cols());
        check_row_array(
            "full",
            &self.full_row_ptr,
            &self.full_col_idx,
            n_rows,
            n_cols,
        )?;
        check_row_array(
            "part",
            &self.part_row_ptr,
            &self.part_col_idx,
            n_rows,
            n_cols,
        )?;
        check_row_array(
            "load",
            &self.load_row_ptr,
            &self.load_col_idx,
            n_rows,
            n_cols,
        )?;
        if self.part_tile_ids.len() != self.part_col_idx.len() {
            return Err(Error::Inconsistent(
                "part_tile_ids length differs from part_col_idx".into(),
            ));
        }
        if self
            .part_tile_ids
            .iter()
            .any(|&t| t >= self.part_mask_pool.len())
        {
            return Err(Error::Inconsistent("part tile id outside pool".into()));
        }
        for i in 0..n_rows {
            if self.load_row_ptr[i] != self.full_row_ptr[i] + self.part_row_ptr[i] {
                return Err(Error::Inconsistent(format!(
                    "load_row_ptr[{i}] is not full + part"
                )));
            }
            let mut union: Vec<usize> = self
                .full_cols(i)
                .iter()
                .chain(self.part_cols(i))
                .copied()
                .collect();
            union.sort_unstable();
            if union.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Inconsistent(format!(
                    "row {i} has a tile that is both full and part"
                )));
            }
            if union != self.load_cols(i) {
                return Err(Error::Inconsistent(format!(
                    "row {i} load set is not full ∪ part"
                )));
            }
        }
        let area = self.block_m * self.block_n;
        let mut seen = HashMap::new();
        for (k, t) in self.part_mask_pool.iter().enumerate() {
            if t.len() != area {
                return Err(Error::Inconsistent(format!(
                    "pool tile {k} has {} bits",
                    t.len()
                )));
            }
            if t.iter().all(|&b| b) || !t.iter().any(|&b| b) {
                return Err(Error::Inconsistent(format!("pool tile {k} is not mixed")));
            }
            if let Some(prev) = seen.insert(pack_bits(t), k) {
                return Err(Error::Inconsistent(format!(
                    "pool tiles {prev} and {k} are identical"
                )));
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Result<DenseMask> {
        self.validate()?;
        let s = self.seq_len;
        let mut mask = DenseMask::all_false(s);
        for bi in 0..self.n_rows() {
            for &bj in self.load_cols(bi) {
                let class = self
                    .classify(bi, bj)
                    .ok_or_else(|| Error::Inconsistent(format!("tile ({bi},{bj}) unclassified")))?;
                for r in 0..self.block_m {
                    let i = bi * self.block_m + r;
                    if i >= s {
                        break;
                    }
                    for c in 0..self.block_n {
                        let j = bj * self.block_n + c;
                        if j >= s {
                            break;
                        }
                        let v = match class {
                            TileClass::Full => true,
                            TileClass::Part(id) => self.part_mask_pool[id][r * self.block_n + c],
                        };
                        mask.set(i, j, v);
                    }
                }
            }
        }
        Ok(mask)
    }

    pub fn block_stats(&self) -> BlockStats {
        let (n_rows, n_cols) = (self.n_rows(), self.n_cols());
        let full_count = *self.full_row_ptr.last().unwrap_or(&0);
        let part_count = *self.part_row_ptr.last().unwrap_or(&0);
        let total = n_rows * n_cols;
        BlockStats {
            block_m: self.block_m,
            block_n: self.block_n,
            n_rows,
            n_cols,
            full_count,
            part_count,
            empty_count: total - full_count - part_count,
            pool_size: self.part_mask_pool.len(),
            valid_block_ratio: if total == 0 {
                0.0
            } else {
                (full_count + part_count) as f64 / total as f64
            },
        }
    }

    /// Binary dump for cross-implementation diffing. Layout (little-endian):
    /// `SFBR`, u32 version, u32 seq_len, u32 block_m, u32 block_n, then the
    /// seven index arrays (full_row_ptr, full_col_idx, part_row_ptr,
    /// part_col_idx, part_tile_ids, load_row_ptr, load_col_idx) each as a u32
    /// length followed by u32 entries, then a u32 pool count and each pool tile
    /// bit-packed LSB-first in `ceil(block_m·block_n / 8)` bytes.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let to_u32 = |v: usize| -> Result<u32> {
            u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))
        };
        w.write_all(BSR_MAGIC)?;
        for v in [
            BSR_VERSION as usize,
            self.seq_len,
            self.block_m,
            self.block_n,
        ] {
            w.write_all(&to_u32(v)?.to_le_bytes())?;
        }
        for arr in self.arrays() {
            w.write_all(&to_u32(arr.len())?.to_le_bytes())?;
            for &v in arr {
                w.write_all(&to_u32(v)?.to_le_bytes())?;
            }
        }
        w.write_all(&to_u32(self.part_mask_pool.len())?.to_le_bytes())?;
        for t in &self.part_mask_pool {
            w.write_all(&pack_bits(t))?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BSR_MAGIC {
            return Err(Error::Format("bad BSR magic".into()));
        }
        let read_u32 = |r: &mut R| -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let version = read_u32(&mut r)?;
        if version != BSR_VERSION as usize {
            return Err(Error::Format(format!("unsupported BSR version {version}")));
        }
        let seq_len = read_u32(&mut r)?;
        let block_m = read_u32(&mut r)?;
        let block_n = read_u32(&mut r)?;
        let mut arrays: Vec<Vec<usize>> = Vec::with_capacity(7);
        for _ in 0..7 {
            let n = read_u32(&mut r)?;
            let mut arr = Vec::with_capacity(n);
            for _ in 0..n {
                arr.push(read_u32(&mut r)?);
            }
            arrays.push(arr);
        }
        let pool_len = read_u32(&mut r)?;
        let area = block_m * block_n;
        let mut pool = Vec::with_capacity(pool_len);
        for _ in 0..pool_len {
            let mut bytes = vec![0u8; area.div_ceil(8)];
            r.read_exact(&mut bytes)?;
            pool.push(unpack_bits(&bytes, area));
        }
        let mut it = arrays.into_iter();
        let mut next = || it.next().unwrap();
        let bsr = BsrMask {
            seq_len,
            block_m,
            block_n,
            full_row_ptr: next(),
            full_col_idx: next(),
            part_row_ptr: next(),
            part_col_idx: next(),
            part_tile_ids: next(),
            part_mask_pool: pool,
            load_row_ptr: next(),
            load_col_idx: next(),
        };
        bsr.validate()?;
        Ok(bsr)
    }

    fn arrays(&self) -> [&[usize]; 7] {
        [
            &self.full_row_ptr,
            &self.full_col_idx,
            &self.part_row_ptr,
            &self.part_col_idx,
            &self.part_tile_ids,
            &self.load_row_ptr,
            &self.load_col_idx,
        ]
    }
}

pub fn to_dense(bsr: &BsrMask) -> Result<DenseMask> {
    bsr.to_dense()
}

pub fn block_stats(bsr: &BsrMask) -> BlockStats {
    bsr.block_stats()
}

/// CSR over individual valid cells, the storage behind the row-wise kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowwiseMask {
    pub seq_len: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl RowwiseMask {
    pub fn cols(&self, row: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[row]..self.row_ptr[row + 1]]
    }
}

pub fn build_rowwise(mask: &DenseMask) -> RowwiseMask {
    let s = mask.seq_len();
    let mut row_ptr = Vec::with_capacity(s + 1);
    let mut col_idx = Vec::new();
    row_ptr.push(0);
    for i in 0..s {
        col_idx.extend(
            mask.row(i)
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(j, _)| j),
        );
        row_ptr.push(col_idx.len());
    }
    RowwiseMask {
        seq_len: s,
        row_ptr,
        col_idx,
    }
}
