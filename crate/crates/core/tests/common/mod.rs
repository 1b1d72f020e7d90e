//! Independent oracles and instance generators shared by the integration
//! tests and the acceptance suite. Nothing here calls the library routine it
//! is used to check.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsefuse::backend::exec::{BoundOp, Matrix, MiOp};
use sparsefuse::backend::{Discounts, PlantedScheme, SyntheticCostModel};
use sparsefuse::fusion::{FusionScheme, Hyper, OpGraph, OpKind, Segment};
use sparsefuse::kernel::HardwareSpec;
use sparsefuse::mask::DenseMask;
use sparsefuse::search::{ParamSetting, ParamSpace};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- masks / BSR

pub fn random_mask(rng: &mut ChaCha8Rng, seq_len: usize) -> DenseMask {
    let density: f64 = rng.random_range(0.0..1.0);
    match rng.random_range(0..4) {
        0 => DenseMask::from_fn(seq_len, |_, _| rng.random_bool(density)),
        1 => {
            let band = rng.random_range(1..=seq_len);
            DenseMask::from_fn(seq_len, |i, j| i.abs_diff(j) < band)
        }
        2 => {
            // block-structured with a few flipped bits
            let b = rng.random_range(1..=8);
            let tiles: Vec<bool> = (0..seq_len.div_ceil(b).pow(2))
                .map(|_| rng.random_bool(density))
                .collect();
            let nb = seq_len.div_ceil(b);
            let mut m = DenseMask::from_fn(seq_len, |i, j| tiles[(i / b) * nb + j / b]);
            for _ in 0..rng.random_range(0..4) {
                let (i, j) = (rng.random_range(0..seq_len), rng.random_range(0..seq_len));
                let v = m.get(i, j);
                m.set(i, j, !v);
            }
            m
        }
        _ => DenseMask::new(seq_len, rng.random_bool(0.5)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tile {
    Full,
    Part,
    Empty,
}

/// Tile classes by direct inspection; edge tiles are padded with false.
pub fn brute_tiles(mask: &DenseMask, bm: usize, bn: usize) -> Vec<Vec<Tile>> {
    let s = mask.seq_len();
    (0..s.div_ceil(bm))
        .map(|bi| {
            (0..s.div_ceil(bn))
                .map(|bj| {
                    let mut any = false;
                    let mut all = true;
                    for i in bi * bm..bi * bm + bm {
                        for j in bj * bn..bj * bn + bn {
                            let v = i < s && j < s && mask.get(i, j);
                            any |= v;
                            all &= v;
                        }
                    }
                    if all {
                        Tile::Full
                    } else if any {
                        Tile::Part
                    } else {
                        Tile::Empty
                    }
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------- kernel model

pub fn brute_threshold(mask: &DenseMask) -> f64 {
    let tiles = brute_tiles(mask, 16, 16);
    let n = tiles.len() as f64;
    let valid = tiles
        .iter()
        .flatten()
        .filter(|t| **t != Tile::Empty)
        .count() as f64;
    valid / (n * n) - 1.2 / (n.log2() * n.log2())
}

/// `(kind_is_blockwise, bm, bn, warps)` by scanning the 4×4×4 grid.
pub fn brute_plan(
    mask: &DenseMask,
    hw: &HardwareSpec,
    heads: usize,
    bs: usize,
    d: usize,
) -> (bool, usize, usize, usize) {
    let s = mask.seq_len();
    if s <= 16 || brute_threshold(mask) < 0.0 {
        return (false, 0, 0, 0);
    }
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for bm in [16usize, 32, 64, 128] {
        for bn in [16usize, 32, 64, 128] {
            for w in [1usize, 2, 4, 8] {
                let req_bytes = ((2 * bm + bn) * (d + 16) + bm * (bn + 16)) * hw.element_bytes;
                if req_bytes > hw.smem_size {
                    continue;
                }
                let blocks = (hw.smem_size / req_bytes).min(hw.max_warp / w);
                let occ = (w * blocks) as f64 / hw.max_warp as f64;
                if occ <= 0.0 {
                    continue;
                }
                let score =
                    occ * (hw.sm_num as f64 / (bm * bn) as f64).sqrt() * (s * heads * bs) as f64
                        / bm as f64;
                if best.is_none_or(|b| score > b.0) {
                    best = Some((score, bm, bn, w));
                }
            }
        }
    }
    match best {
        Some((_, bm, bn, w)) => (true, bm, bn, w),
        None => (false, 0, 0, 0),
    }
}

// ---------------------------------------------------------------- fusion

pub fn is_ci(k: OpKind) -> bool {
    matches!(k, OpKind::Gemm | OpKind::MhaFused)
}

/// Legality straight from the definition, over inclusive-exclusive ranges.
pub fn brute_legal(kinds: &[OpKind], segs: &[(usize, usize)]) -> bool {
    let mut next = 0;
    for &(s, e) in segs {
        if s != next || e <= s || e > kinds.len() {
            return false;
        }
        next = e;
        let ops = &kinds[s..e];
        if ops.iter().filter(|k| is_ci(**k)).count() > 2 {
            return false;
        }
        if ops.contains(&OpKind::MhaFused) && ops.len() != 1 {
            return false;
        }
    }
    next == kinds.len()
}

/// Every partition of `0..n` into contiguous ranges.
pub fn all_partitions(n: usize) -> Vec<Vec<(usize, usize)>> {
    (0u32..1 << (n - 1))
        .map(|cuts| {
            let mut segs = Vec::new();
            let mut start = 0;
            for i in 1..n {
                if cuts >> (i - 1) & 1 == 1 {
                    segs.push((start, i));
                    start = i;
                }
            }
            segs.push((start, n));
            segs
        })
        .collect()
}

pub fn to_scheme(segs: &[(usize, usize)]) -> FusionScheme {
    FusionScheme {
        segments: segs.iter().map(|&(s, e)| Segment::new(s, e)).collect(),
    }
}

pub fn kinds(graph: &OpGraph) -> Vec<OpKind> {
    graph.nodes.iter().map(|n| n.kind).collect()
}

pub fn hyper(bs: usize) -> Hyper {
    Hyper {
        bs,
        seq_len: 64,
        hidden_dim: 16,
        heads: 2,
    }
}

pub fn random_kind(rng: &mut ChaCha8Rng, allow_mha: bool) -> OpKind {
    use OpKind::*;
    let pool: &[OpKind] = if allow_mha {
        &[
            Gemm, Gemm, Gemm, Bias, Add, LayerNorm, Gelu, Relu, Softmax, MhaFused,
        ]
    } else {
        &[
            Gemm, Gemm, Gemm, Bias, Bias, Add, LayerNorm, Gelu, Relu, Softmax,
        ]
    };
    pool[rng.random_range(0..pool.len())]
}

pub fn random_chain(rng: &mut ChaCha8Rng, n: usize, allow_mha: bool) -> OpGraph {
    let kinds: Vec<OpKind> = (0..n).map(|_| random_kind(rng, allow_mha)).collect();
    let bs = if rng.random_bool(0.5) { 1 } else { 128 };
    OpGraph::chain("random", &kinds, hyper(bs), &[])
}

/// A random legal scheme built by merging unfused singletons at random.
pub fn random_legal_scheme(rng: &mut ChaCha8Rng, kinds: &[OpKind]) -> Vec<(usize, usize)> {
    let mut segs: Vec<(usize, usize)> = (0..kinds.len()).map(|i| (i, i + 1)).collect();
    let attempts = rng.random_range(0..=kinds.len());
    for _ in 0..attempts {
        if segs.len() < 2 {
            break;
        }
        let k = rng.random_range(0..segs.len() - 1);
        let mut trial = segs.clone();
        trial[k].1 = trial[k + 1].1;
        trial.remove(k + 1);
        if brute_legal(kinds, &trial) {
            segs = trial;
        }
    }
    segs
}

/// Small grids so that K = 4 samples cover each grid exactly.
pub fn small_space() -> ParamSpace {
    ParamSpace::from_axes(&[256, 1024, 4096], &[16, 32], &[32], &[16, 32], &[1])
}

pub fn grid_sizes_at_most(space: &ParamSpace, k: usize) -> bool {
    space.mi_chain.len() <= k && space.ci_mi.len() <= k && space.ci_ci.len() <= k
}

/// Minimum over legal schemes of the summed per-segment grid minimum.
pub fn exhaustive_optimum(
    graph: &OpGraph,
    model: &SyntheticCostModel,
    space: &ParamSpace,
) -> (f64, Vec<(usize, usize)>) {
    let ks = kinds(graph);
    let mut best = (f64::INFINITY, Vec::new());
    for segs in all_partitions(ks.len()) {
        if !brute_legal(&ks, &segs) {
            continue;
        }
        let mut total = 0.0;
        for &(s, e) in &segs {
            if ks[s..e].contains(&OpKind::MhaFused) {
                continue;
            }
            let ci = ks[s..e].iter().filter(|k| is_ci(**k)).count();
            let grid: Vec<ParamSetting> = match ci {
                0 => space.mi_chain.clone(),
                1 => space.ci_mi.clone(),
                _ => space.ci_ci.clone(),
            };
            let seg_best = grid
                .iter()
                .map(|st| model.segment_cost(graph, Segment::new(s, e), st).unwrap())
                .fold(f64::INFINITY, f64::min);
            total += seg_best;
        }
        if total < best.0 {
            best = (total, segs);
        }
    }
    best
}

/// Six-op chain with a planted target scheme that coarsens `init` and a cost
/// model whose optimum is exactly that target.
pub fn planted_instance(
    rng: &mut ChaCha8Rng,
    init_of: impl Fn(&OpGraph) -> FusionScheme,
) -> (OpGraph, SyntheticCostModel, Vec<(usize, usize)>) {
    let graph = random_chain(rng, 6, false);
    let init = init_of(&graph);
    let (model, target) = planted_model(rng, &graph, &init);
    (graph, model, target)
}

/// A random legal coarsening of `init` and a model whose optimum it is:
/// every segment inside the target is discounted, every crossing one pays
/// a penalty.
pub fn planted_model(
    rng: &mut ChaCha8Rng,
    graph: &OpGraph,
    init: &FusionScheme,
) -> (SyntheticCostModel, Vec<(usize, usize)>) {
    let ks = kinds(graph);
    let mut target: Vec<(usize, usize)> = init.segments.iter().map(|s| (s.start, s.end)).collect();
    for _ in 0..ks.len() + 2 {
        if target.len() < 2 {
            break;
        }
        let k = rng.random_range(0..target.len() - 1);
        let mut trial = target.clone();
        trial[k].1 = trial[k + 1].1;
        trial.remove(k + 1);
        if brute_legal(&ks, &trial) && rng.random_bool(0.7) {
            target = trial;
        }
    }
    let model = SyntheticCostModel {
        op_costs: Some((0..ks.len()).map(|_| rng.random_range(0.5..1.5)).collect()),
        launch_overhead: 0.2,
        discount: Discounts::uniform(0.85),
        param_alpha: 0.001,
        param_seed: rng.random(),
        planted: Some(PlantedScheme::new(&to_scheme(&target), 2.0)),
        ..Default::default()
    };
    (model, target)
}

/// Six-op chain with unstructured costs and launch overhead; every fusion
/// discount lies in [0.7, 0.95].
pub fn random_instance(rng: &mut ChaCha8Rng) -> (OpGraph, SyntheticCostModel) {
    let graph = random_chain(rng, 6, false);
    let model = SyntheticCostModel {
        op_costs: Some((0..6).map(|_| rng.random_range(0.2..2.0)).collect()),
        launch_overhead: rng.random_range(0.0..0.3),
        discount: Discounts {
            mi_chain: rng.random_range(0.7..0.95),
            ci_mi: rng.random_range(0.7..0.95),
            ci_ci: rng.random_range(0.7..0.95),
        },
        param_alpha: 0.05,
        param_seed: rng.random(),
        planted: None,
        ..Default::default()
    };
    (graph, model)
}

// ---------------------------------------------------------------- executors

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

pub fn random_mi(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> MiOp {
    match rng.random_range(0..6) {
        0 => MiOp::Bias((0..cols).map(|_| rng.random_range(-0.5..0.5)).collect()),
        1 => MiOp::Add(random_matrix(rng, rows, cols, 1.0)),
        2 => MiOp::Gelu,
        3 => MiOp::Relu,
        4 => MiOp::LayerNorm {
            gamma: (0..cols).map(|_| rng.random_range(0.5..1.5)).collect(),
            beta: (0..cols).map(|_| rng.random_range(-0.5..0.5)).collect(),
        },
        _ => MiOp::Softmax,
    }
}

pub fn random_mi_run(rng: &mut ChaCha8Rng, rows: usize, cols: usize, max: usize) -> Vec<MiOp> {
    (0..rng.random_range(0..=max))
        .map(|_| random_mi(rng, rows, cols))
        .collect()
}

/// Sequential f64 evaluation of `ops`.
pub fn reference_f64(ops: &[BoundOp], input: &Matrix) -> (usize, usize, Vec<f64>) {
    let rows = input.rows;
    let mut cols = input.cols;
    let mut x: Vec<f64> = input.data.iter().map(|&v| v as f64).collect();
    for op in ops {
        match op {
            BoundOp::Gemm(w) => {
                let mut y = vec![0.0; rows * w.cols];
                for i in 0..rows {
                    for j in 0..w.cols {
                        let mut acc = 0.0;
                        for k in 0..cols {
                            acc += x[i * cols + k] * w.data[k * w.cols + j] as f64;
                        }
                        y[i * w.cols + j] = acc;
                    }
                }
                x = y;
                cols = w.cols;
            }
            BoundOp::Mi(mi) => match mi {
                MiOp::Bias(b) => x
                    .iter_mut()
                    .enumerate()
                    .for_each(|(k, v)| *v += b[k % cols] as f64),
                MiOp::Add(s) => x.iter_mut().zip(&s.data).for_each(|(v, &a)| *v += a as f64),
                MiOp::Gelu => {
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    x.iter_mut().for_each(|v| {
                        *v = 0.5 * *v * (1.0 + (c * (*v + 0.044715 * v.powi(3))).tanh())
                    });
                }
                MiOp::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
                MiOp::LayerNorm { gamma, beta } => {
                    for row in x.chunks_mut(cols) {
                        let mean = row.iter().sum::<f64>() / cols as f64;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + 1e-5).sqrt();
                        for (k, v) in row.iter_mut().enumerate() {
                            *v = (*v - mean) * inv * gamma[k] as f64 + beta[k] as f64;
                        }
                    }
                }
                MiOp::Softmax => {
                    for row in x.chunks_mut(cols) {
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
                    }
                }
            },
        }
    }
    (rows, cols, x)
}

pub fn max_err(got: &Matrix, want: &[f64]) -> f64 {
    got.data
        .iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0, f64::max)
}

pub fn tile_choice(rng: &mut ChaCha8Rng) -> usize {
    [16, 32, 64][rng.random_range(0..3)]
}
