//! Scaled dot-product attention executors over sparse masks.
//!
//! Three paths compute the same thing:
//!
//! * [`dense_sdpa_oracle`] materialises every score row and masks with `-inf`;
//! * [`block_sparse_sdpa`] walks only the tiles listed in the BSR load arrays
//!   and folds them into a streaming (online) softmax;
//! * [`rowwise_sdpa`] gathers the valid keys of each query row.
//!
//! Scores are scaled by `1/sqrt(head_size)`. A query row with no valid key
//! produces an all-zero output row in every executor.

use std::collections::BTreeSet;
use std::iter::Sum;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bsr::{BsrMask, RowwiseMask, TileClass};
use crate::error::{Error, Result};
use crate::kernel::{KernelKind, KernelPlan};
use crate::mask::DenseMask;

/// Floating point element usable by the executors.
pub trait Scalar: Float + Sum + Send + Sync + std::fmt::Debug + 'static {}
impl<T: Float + Sum + Send + Sync + std::fmt::Debug + 'static> Scalar for T {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub bs: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub head_size: usize,
}

impl AttentionShape {
    pub fn numel(&self) -> usize {
        self.bs * self.heads * self.seq_len * self.head_size
    }

    fn slice_len(&self) -> usize {
        self.seq_len * self.head_size
    }
}

/// Q, K and V laid out as `(bs, heads, seq_len, head_size)`, row-major.
#[derive(Debug, Clone)]
pub struct AttentionInput<T> {
    pub shape: AttentionShape,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<T> {
    pub shape: AttentionShape,
    pub o: Vec<T>,
}

impl<T: Scalar> AttentionInput<T> {
    pub fn new(shape: AttentionShape, q: Vec<T>, k: Vec<T>, v: Vec<T>) -> Result<Self> {
        let n = shape.numel();
        if q.len() != n || k.len() != n || v.len() != n {
            return Err(Error::Shape(format!(
                "Q/K/V lengths {}/{}/{} do not match {:?}",
                q.len(),
                k.len(),
                v.len(),
                shape
            )));
        }
        if q.iter().chain(&k).chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(
                "attention inputs must be finite".into(),
            ));
        }
        Ok(Self { shape, q, k, v })
    }

    pub fn cast<U: Scalar>(&self) -> AttentionInput<U> {
        let conv = |xs: &[T]| xs.iter().map(|&x| U::from(x).unwrap()).collect();
        AttentionInput {
            shape: self.shape,
            q: conv(&self.q),
            k: conv(&self.k),
            v: conv(&self.v),
        }
    }

    fn check_seq_len(&self, seq_len: usize) -> Result<()> {
        if seq_len != self.shape.seq_len {
            return Err(Error::Shape(format!(
                "mask seq_len {seq_len} does not match input seq_len {}",
                self.shape.seq_len
            )));
        }
        Ok(())
    }

    fn slices(&self, idx: usize) -> (&[T], &[T], &[T]) {
        let n = self.shape.slice_len();
        let r = idx * n..(idx + 1) * n;
        (&self.q[r.clone()], &self.k[r.clone()], &self.v[r])
    }
}

impl AttentionInput<f64> {
    /// Uniform `[-1, 1)` tensors from a seeded ChaCha8 stream.
    pub fn random(shape: AttentionShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.numel();
        let mut draw = || {
            (0..n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let q = draw();
        let k = draw();
        let v = draw();
        Self { shape, q, k, v }
    }
}

impl<T: Scalar> AttentionOutput<T> {
    pub fn max_abs_diff<U: Scalar>(&self, other: &AttentionOutput<U>) -> f64 {
        self.o
            .iter()
            .zip(&other.o)
            .map(|(&a, &b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
            .fold(0.0, f64::max)
    }

    /// Output row `(b, h, i)`.
    pub fn row(&self, b: usize, h: usize, i: usize) -> &[T] {
        let s = &self.shape;
        let start = ((b * s.heads + h) * s.seq_len + i) * s.head_size;
        &self.o[start..start + s.head_size]
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn scale_of<T: Scalar>(head_size: usize) -> T {
    T::one() / T::from(head_size).unwrap().sqrt()
}

fn run_slices<T: Scalar, R: Send>(
    shape: AttentionShape,
    f: impl Fn(usize, &mut [T]) -> R + Sync + Send,
) -> (AttentionOutput<T>, Vec<R>) {
    let mut o = vec![T::zero(); shape.numel()];
    let results = if shape.slice_len() == 0 {
        Vec::new()
    } else {
        o.par_chunks_mut(shape.slice_len())
            .enumerate()
            .map(|(idx, out)| f(idx, out))
            .collect()
    };
    (AttentionOutput { shape, o }, results)
}

/// Reference attention: full score rows, `-inf` on masked cells.
pub fn dense_sdpa_oracle<T: Scalar>(
    input: &AttentionInput<T>,
    mask: &DenseMask,
) -> Result<AttentionOutput<T>> {
    input.check_seq_len(mask.seq_len())?;
    let AttentionShape {
        seq_len: s,
        head_size: d,
        ..
    } = input.shape;
    let scale = scale_of::<T>(d);
    let (out, _) = run_slices(input.shape, |idx, out: &mut [T]| {
        let (q, k, v) = input.slices(idx);
        let mut scores = vec![T::neg_infinity(); s];
        for i in 0..s {
            let qi = &q[i * d..(i + 1) * d];
            for (j, sc) in scores.iter_mut().enumerate() {
                let raw = dot(qi, &k[j * d..(j + 1) * d]) * scale;
                *sc = if mask.get(i, j) {
                    raw
                } else {
                    T::neg_infinity()
                };
            }
            let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
            if m == T::neg_infinity() {
                continue;
            }
            let mut denom = T::zero();
            for sc in scores.iter_mut() {
                *sc = (*sc - m).exp();
                denom = denom + *sc;
            }
            let oi = &mut out[i * d..(i + 1) * d];
            for (j, &p) in scores.iter().enumerate() {
                if p == T::zero() {
                    continue;
                }
                let w = p / denom;
                for (o, &vv) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *o = *o + w * vv;
                }
            }
        }
    });
    Ok(out)
}

/// Tiles visited by the block-sparse executor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TileTrace {
    /// Distinct `(query tile, key tile)` pairs touched in any slice.
    pub tiles: BTreeSet<(usize, usize)>,
    /// Total tile visits summed over every `(batch, head)` slice.
    pub visits: usize,
}

pub fn block_sparse_sdpa<T: Scalar>(
    input: &AttentionInput<T>,
    bsr: &BsrMask,
) -> Result<AttentionOutput<T>> {
    block_sparse_sdpa_traced(input, bsr).map(|(o, _)| o)
}

/// Block-sparse attention run under a kernel plan; the BSR must be built at
/// the plan's block sizes.
pub fn block_sparse_sdpa_planned<T: Scalar>(
    input: &AttentionInput<T>,
    bsr: &BsrMask,
    plan: &KernelPlan,
) -> Result<AttentionOutput<T>> {
    if plan.kind != KernelKind::BlockWise {
        return Err(Error::Plan("plan selects the row-wise kernel".into()));
    }
    if (plan.block_m, plan.block_n) != (bsr.block_m, bsr.block_n) {
        return Err(Error::Plan(format!(
            "BSR built at {}x{} but plan expects {}x{}",
            bsr.block_m, bsr.block_n, plan.block_m, plan.block_n
        )));
    }
    block_sparse_sdpa(input, bsr)
}

/// Online-softmax attention over the BSR load set. Each query tile keeps a
/// running row max, normaliser and unnormalised accumulator; every loaded key
/// tile rescales them by `exp(m_old - m_new)`. K and V are only read for
/// loaded tiles.
pub fn block_sparse_sdpa_traced<T: Scalar>(
    input: &AttentionInput<T>,
    bsr: &BsrMask,
) -> Result<(AttentionOutput<T>, TileTrace)> {
    input.check_seq_len(bsr.seq_len)?;
    let AttentionShape {
        seq_len: s,
        head_size: d,
        ..
    } = input.shape;
    let (bm, bn) = (bsr.block_m, bsr.block_n);
    let scale = scale_of::<T>(d);
    let n_rows = bsr.n_rows();

    let (out, traces) = run_slices(input.shape, |idx, out: &mut [T]| {
        let (q, k, v) = input.slices(idx);
        let mut visited = Vec::new();
        let mut row_max = vec![T::neg_infinity(); bm];
        let mut row_sum = vec![T::zero(); bm];
        let mut acc = vec![T::zero(); bm * d];
        let mut scores = vec![T::zero(); bn];

        for bi in 0..n_rows {
            let r0 = bi * bm;
            let rows = bm.min(s - r0);
            row_max[..rows].fill(T::neg_infinity());
            row_sum[..rows].fill(T::zero());
            acc[..rows * d].fill(T::zero());

            for &bj in bsr.load_cols(bi) {
                visited.push((bi, bj));
                let class = bsr
                    .classify(bi, bj)
                    .expect("load tile must be full or part");
                let c0 = bj * bn;
                let cols = bn.min(s - c0);
                for r in 0..rows {
                    let qi = &q[(r0 + r) * d..(r0 + r + 1) * d];
                    let mut tile_max = T::neg_infinity();
                    for c in 0..cols {
                        let valid = match class {
                            TileClass::Full => true,
                            TileClass::Part(id) => bsr.part_mask_pool[id][r * bn + c],
                        };
                        scores[c] = if valid {
                            dot(qi, &k[(c0 + c) * d..(c0 + c + 1) * d]) * scale
                        } else {
                            T::neg_infinity()
                        };
                        tile_max = tile_max.max(scores[c]);
                    }
                    if tile_max == T::neg_infinity() {
                        continue;
                    }
                    let m_new = row_max[r].max(tile_max);
                    let alpha = if row_max[r] == T::neg_infinity() {
                        T::zero()
                    } else {
                        (row_max[r] - m_new).exp()
                    };
                    let a = &mut acc[r * d..(r + 1) * d];
                    if alpha != T::one() {
                        a.iter_mut().for_each(|x| *x = *x * alpha);
                    }
                    let mut l = row_sum[r] * alpha;
                    for c in 0..cols {
                        if scores[c] == T::neg_infinity() {
                            continue;
                        }
                        let p = (scores[c] - m_new).exp();
                        l = l + p;
                        for (x, &vv) in a.iter_mut().zip(&v[(c0 + c) * d..(c0 + c + 1) * d]) {
                            *x = *x + p * vv;
                        }
                    }
                    row_sum[r] = l;
                    row_max[r] = m_new;
                }
            }

            for r in 0..rows {
                if row_sum[r] > T::zero() {
                    let inv = T::one() / row_sum[r];
                    let dst = &mut out[(r0 + r) * d..(r0 + r + 1) * d];
                    for (o, &x) in dst.iter_mut().zip(&acc[r * d..(r + 1) * d]) {
                        *o = x * inv;
                    }
                }
            }
        }
        visited
    });

    let mut trace = TileTrace::default();
    for slice in traces {
        trace.visits += slice.len();
        trace.tiles.extend(slice);
    }
    Ok((out, trace))
}

/// Row-wise attention: gather valid columns, exact softmax over them.
pub fn rowwise_sdpa<T: Scalar>(
    input: &AttentionInput<T>,
    rw: &RowwiseMask,
) -> Result<AttentionOutput<T>> {
    input.check_seq_len(rw.seq_len)?;
    let AttentionShape {
        seq_len: s,
        head_size: d,
        ..
    } = input.shape;
    let scale = scale_of::<T>(d);
    let (out, _) = run_slices(input.shape, |idx, out: &mut [T]| {
        let (q, k, v) = input.slices(idx);
        let mut gathered: Vec<T> = Vec::with_capacity(s);
        for i in 0..s {
            let cols = rw.cols(i);
            if cols.is_empty() {
                continue;
            }
            let qi = &q[i * d..(i + 1) * d];
            gathered.clear();
            gathered.extend(
                cols.iter()
                    .map(|&j| dot(qi, &k[j * d..(j + 1) * d]) * scale),
            );
            let m = gathered.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for g in gathered.iter_mut() {
                *g = (*g - m).exp();
                denom = denom + *g;
            }
            let oi = &mut out[i * d..(i + 1) * d];
            for (&j, &p) in cols.iter().zip(&gathered) {
                let w = p / denom;
                for (o, &vv) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *o = *o + w * vv;
                }
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsr::{build_bsr, build_rowwise};
    use crate::mask::{gen_bigbird, gen_sliding_window};

    fn shape(bs: usize, heads: usize, seq_len: usize, head_size: usize) -> AttentionShape {
        AttentionShape {
            bs,
            heads,
            seq_len,
            head_size,
        }
    }

    #[test]
    fn hand_computed_two_by_two() {
        // seq_len 2, head_size 1: q = [1, 2], k = [0, 1], v = [10, 20]
        // row 0 scores [0, 1] -> p = [1, e] / (1 + e)
        // row 1 scores [0, 2] -> p = [1, e²] / (1 + e²)
        let input = AttentionInput::new(
            shape(1, 1, 2, 1),
            vec![1.0, 2.0],
            vec![0.0, 1.0],
            vec![10.0, 20.0],
        )
        .unwrap();
        let out = dense_sdpa_oracle(&input, &DenseMask::all_true(2)).unwrap();
        let e = std::f64::consts::E;
        let r0 = (10.0 + 20.0 * e) / (1.0 + e);
        let r1 = (10.0 + 20.0 * e * e) / (1.0 + e * e);
        assert!((out.o[0] - r0).abs() < 1e-12);
        assert!((out.o[1] - r1).abs() < 1e-12);
    }

    #[test]
    fn all_false_gives_zero_everywhere() {
        let input = AttentionInput::random(shape(2, 2, 40, 8), 1);
        let m = DenseMask::all_false(40);
        assert!(dense_sdpa_oracle(&input, &m)
            .unwrap()
            .o
            .iter()
            .all(|&x| x == 0.0));
        let (o, trace) = block_sparse_sdpa_traced(&input, &build_bsr(&m, 16, 16).unwrap()).unwrap();
        assert!(o.o.iter().all(|&x| x == 0.0));
        assert_eq!(trace.visits, 0);
        assert!(rowwise_sdpa(&input, &build_rowwise(&m))
            .unwrap()
            .o
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn singleton_rows_copy_value() {
        // each row i attends only to (i + 3) mod s
        let s = 24;
        let input = AttentionInput::random(shape(1, 2, s, 4), 7);
        let m = DenseMask::from_fn(s, |i, j| j == (i + 3) % s);
        let out = dense_sdpa_oracle(&input, &m).unwrap();
        for h in 0..2 {
            for i in 0..s {
                let j = (i + 3) % s;
                let base = (h * s + j) * 4;
                let got = out.row(0, h, i);
                for (g, v) in got.iter().zip(&input.v[base..base + 4]) {
                    assert!((g - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identity_rowwise_is_v() {
        let input = AttentionInput::random(shape(2, 1, 16, 8), 3);
        let eye = DenseMask::from_fn(16, |i, j| i == j);
        let out = rowwise_sdpa(&input, &build_rowwise(&eye)).unwrap();
        assert_eq!(out.o, input.v);
    }

    #[test]
    fn single_full_tile_matches_unmasked() {
        let input = AttentionInput::random(shape(1, 1, 32, 16), 5).cast::<f32>();
        let m = DenseMask::all_true(32);
        let b = block_sparse_sdpa(&input, &build_bsr(&m, 32, 32).unwrap()).unwrap();
        let o = dense_sdpa_oracle(&input, &m).unwrap();
        assert!(b.max_abs_diff(&o) < 1e-6);
    }

    #[test]
    fn block_sparse_matches_oracle_on_bigbird() {
        let input = AttentionInput::random(shape(1, 2, 96, 16), 9);
        let m = gen_bigbird(96, 4, 8, 0.2, 2).unwrap();
        let oracle = dense_sdpa_oracle(&input, &m).unwrap();
        for (bm, bn) in [(16, 16), (32, 16), (16, 64), (7, 5)] {
            let got =
                block_sparse_sdpa(&input.cast::<f32>(), &build_bsr(&m, bm, bn).unwrap()).unwrap();
            assert!(got.max_abs_diff(&oracle) <= 1e-5, "{bm}x{bn}");
        }
    }

    #[test]
    fn trace_matches_load_set() {
        let m = gen_sliding_window(256, 32).unwrap();
        let b = build_bsr(&m, 16, 16).unwrap();
        let input = AttentionInput::random(shape(1, 2, 256, 8), 1).cast::<f32>();
        let (_, trace) = block_sparse_sdpa_traced(&input, &b).unwrap();
        assert_eq!(trace.tiles.len(), b.valid_count());
        assert_eq!(trace.visits, 2 * b.valid_count());
        for (bi, bj) in &trace.tiles {
            assert!(b.load_cols(*bi).contains(bj));
        }
    }

    #[test]
    fn shape_errors() {
        let input = AttentionInput::random(shape(1, 1, 8, 2), 0);
        assert!(matches!(
            dense_sdpa_oracle(&input, &DenseMask::all_true(9)),
            Err(Error::Shape(_))
        ));
        assert!(
            AttentionInput::new(shape(1, 1, 2, 1), vec![0.0; 2], vec![0.0; 2], vec![0.0; 3])
                .is_err()
        );
        assert!(
            AttentionInput::new(shape(1, 1, 1, 1), vec![f64::NAN], vec![0.0], vec![0.0]).is_err()
        );
    }

    #[test]
    fn plan_block_mismatch_is_plan_error() {
        let input = AttentionInput::random(shape(1, 1, 64, 8), 0);
        let b = build_bsr(&DenseMask::all_true(64), 16, 16).unwrap();
        let plan = KernelPlan::block_wise(32, 16, 4, 1.0, 0.5);
        assert!(matches!(
            block_sparse_sdpa_planned(&input, &b, &plan),
            Err(Error::Plan(_))
        ));
        let plan = KernelPlan::block_wise(16, 16, 4, 1.0, 0.5);
        assert!(block_sparse_sdpa_planned(&input, &b, &plan).is_ok());
    }
}
