//! Analytical MHA kernel selection.
//!
//! Stage one picks between the row-wise and block-wise kernels from the ratio
//! of valid 16×16 tiles:
//!
//! ```text
//! threshold = L / N² − τ / (log2 N)²,   N = ceil(seq_len / 16),  L = valid tiles
//! ```
//!
//! A negative threshold selects the row-wise kernel. Otherwise every feasible
//! `(block_m, block_n, num_warps)` is scored by
//!
//! ```text
//! req_smem = (2·bm + bn)·(head_size + pad) + bm·(bn + pad)       [elements]
//! occ      = warps · min(⌊smem / (req_smem·elem_bytes)⌋, ⌊max_warp / warps⌋) / max_warp
//! score    = occ · sqrt(sm_num / (bm·bn)) · seq_len·h·bs / bm
//! ```
//!
//! and the highest score wins; exact ties keep the lexicographically smallest
//! setting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsr::build_bsr;
use crate::error::{Error, Result};
use crate::mask::DenseMask;

pub const DEFAULT_TAU: f64 = 1.2;
pub const DEFAULT_PADDING: usize = 16;
/// Granularity of the row-wise/block-wise decision.
pub const SELECTION_BLOCK: usize = 16;
pub const BLOCK_SIZES: [usize; 4] = [16, 32, 64, 128];
pub const WARP_COUNTS: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub name: String,
    pub sm_num: usize,
    /// Shared memory per SM in bytes.
    pub smem_size: usize,
    pub max_warp: usize,
    #[serde(default = "default_element_bytes")]
    pub element_bytes: usize,
}

fn default_element_bytes() -> usize {
    2
}

impl HardwareSpec {
    /// RTX 4090: 128 SMs, 128 KB shared memory per SM, 48 warps per SM.
    pub fn rtx4090() -> Self {
        Self {
            name: "rtx4090".into(),
            sm_num: 128,
            smem_size: 128 * 1024,
            max_warp: 48,
            element_bytes: 2,
        }
    }

    /// A100 PCIe: 108 SMs, 192 KB shared memory per SM, 64 warps per SM.
    pub fn a100() -> Self {
        Self {
            name: "a100".into(),
            sm_num: 108,
            smem_size: 192 * 1024,
            max_warp: 64,
            element_bytes: 2,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "a100" => Some(Self::a100()),
            "rtx4090" | "4090" => Some(Self::rtx4090()),
            _ => None,
        }
    }

    /// A preset name or a path to a JSON hardware file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Some(hw) = Self::preset(name_or_path) {
            return Ok(hw);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(Error::InvalidParameter(format!(
                "unknown hardware preset `{name_or_path}`"
            )));
        }
        let hw: HardwareSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        hw.validate()?;
        Ok(hw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sm_num == 0 || self.smem_size == 0 || self.max_warp == 0 || self.element_bytes == 0
        {
            return Err(Error::InvalidParameter(format!(
                "hardware spec `{}` has a zero field",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    RowWise,
    BlockWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub block_m: usize,
    pub block_n: usize,
    pub num_warps: usize,
    pub req_smem: usize,
    pub occupancy: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelPlan {
    pub kind: KernelKind,
    /// Zero for row-wise plans.
    pub block_m: usize,
    pub block_n: usize,
    pub num_warps: usize,
    pub score: f64,
    /// `None` when seq_len is too short for the threshold to be defined.
    pub threshold: Option<f64>,
    /// Set when no block setting fit in shared memory and the plan fell back
    /// to the row-wise kernel.
    #[serde(default)]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateScore>,
}

impl KernelPlan {
    pub fn row_wise(threshold: Option<f64>) -> Self {
        Self {
            kind: KernelKind::RowWise,
            block_m: 0,
            block_n: 0,
            num_warps: 0,
            score: 0.0,
            threshold,
            fallback: false,
            candidates: Vec::new(),
        }
    }

    pub fn block_wise(
        block_m: usize,
        block_n: usize,
        num_warps: usize,
        score: f64,
        threshold: f64,
    ) -> Self {
        Self {
            kind: KernelKind::BlockWise,
            block_m,
            block_n,
            num_warps,
            score,
            threshold: Some(threshold),
            fallback: false,
            candidates: Vec::new(),
        }
    }
}

/// Valid-tile ratio at 16×16 penalised by `tau / (log2 N)²`.
pub fn threshold(mask: &DenseMask, tau: f64) -> Result<f64> {
    let n = mask.seq_len().div_ceil(SELECTION_BLOCK);
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "seq_len {} gives a single 16-row tile; log2(1) = 0",
            mask.seq_len()
        )));
    }
    let bsr = build_bsr(mask, SELECTION_BLOCK, SELECTION_BLOCK)?;
    let valid = bsr.load_row_ptr[n] as f64;
    let n = n as f64;
    Ok(valid / (n * n) - tau / n.log2().powi(2))
}

/// Shared memory demand of one block, in elements.
pub fn req_smem(block_m: usize, block_n: usize, head_size: usize, padding: usize) -> usize {
    (2 * block_m + block_n) * (head_size + padding) + block_m * (block_n + padding)
}

pub fn occupancy(num_warps: usize, req_smem_elems: usize, hw: &HardwareSpec) -> f64 {
    let bytes = req_smem_elems * hw.element_bytes;
    if num_warps == 0 || bytes == 0 || bytes > hw.smem_size {
        return 0.0;
    }
    let by_smem = hw.smem_size / bytes;
    let by_warps = hw.max_warp / num_warps;
    (num_warps * by_smem.min(by_warps)) as f64 / hw.max_warp as f64
}

#[allow(clippy::too_many_arguments)]
pub fn plan_score(
    block_m: usize,
    block_n: usize,
    num_warps: usize,
    hw: &HardwareSpec,
    seq_len: usize,
    heads: usize,
    bs: usize,
    head_size: usize,
) -> f64 {
    let occ = occupancy(
        num_warps,
        req_smem(block_m, block_n, head_size, DEFAULT_PADDING),
        hw,
    );
    occ * (hw.sm_num as f64 / (block_m * block_n) as f64).sqrt() * (seq_len * heads * bs) as f64
        / block_m as f64
}

/// Scores the whole 4×4×4 grid in lexicographic order.
pub fn score_candidates(
    hw: &HardwareSpec,
    seq_len: usize,
    heads: usize,
    bs: usize,
    head_size: usize,
) -> Vec<CandidateScore> {
    let mut out = Vec::with_capacity(64);
    for &block_m in &BLOCK_SIZES {
        for &block_n in &BLOCK_SIZES {
            for &num_warps in &WARP_COUNTS {
                let req = req_smem(block_m, block_n, head_size, DEFAULT_PADDING);
                out.push(CandidateScore {
                    block_m,
                    block_n,
                    num_warps,
                    req_smem: req,
                    occupancy: occupancy(num_warps, req, hw),
                    score: plan_score(
                        block_m, block_n, num_warps, hw, seq_len, heads, bs, head_size,
                    ),
                });
            }
        }
    }
    out
}

pub fn select_plan(
    mask: &DenseMask,
    hw: &HardwareSpec,
    seq_len: usize,
    heads: usize,
    bs: usize,
    head_size: usize,
) -> Result<KernelPlan> {
    select_plan_with(mask, hw, seq_len, heads, bs, head_size, DEFAULT_TAU, false)
}

#[allow(clippy::too_many_arguments)]
pub fn select_plan_with(
    mask: &DenseMask,
    hw: &HardwareSpec,
    seq_len: usize,
    heads: usize,
    bs: usize,
    head_size: usize,
    tau: f64,
    verbose: bool,
) -> Result<KernelPlan> {
    if mask.seq_len() != seq_len {
        return Err(Error::Shape(format!(
            "mask seq_len {} differs from requested seq_len {seq_len}",
            mask.seq_len()
        )));
    }
    hw.validate()?;
    if seq_len <= SELECTION_BLOCK {
        return Ok(KernelPlan::row_wise(None));
    }
    let t = threshold(mask, tau)?;
    if t < 0.0 {
        return Ok(KernelPlan::row_wise(Some(t)));
    }
    let candidates = score_candidates(hw, seq_len, heads, bs, head_size);
    let mut best: Option<&CandidateScore> = None;
    for c in candidates.iter().filter(|c| c.occupancy > 0.0) {
        if best.is_none_or(|b| c.score > b.score) {
            best = Some(c);
        }
    }
    let mut plan = match best {
        Some(b) => KernelPlan::block_wise(b.block_m, b.block_n, b.num_warps, b.score, t),
        None => {
            log::warn!(
                "no block setting fits {} shared memory; using the row-wise kernel",
                hw.name
            );
            let mut p = KernelPlan::row_wise(Some(t));
            p.fallback = true;
            p
        }
    };
    if verbose {
        plan.candidates = candidates;
    }
    Ok(plan)
}
