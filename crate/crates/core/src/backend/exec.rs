//! Fused CPU segment executors and their unfused references.
//!
//! Every operator in the chain is row-local: element-wise ops touch one
//! element, LayerNorm and Softmax reduce over one row, and a GEMM produces a
//! row of output from the same row of input. A fused executor therefore walks
//! the input in row strips and pushes each strip through the whole segment
//! while it is cache resident. Only the strip height differs between
//! templates: `chunk_size / cols` rows for MI chains, `tile_m` rows for GEMM
//! templates.

use crate::error::{Error, Result};
use crate::fusion::TemplateKind;
use crate::search::ParamSetting;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Row-major `rows × cols` f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}×{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Memory-intensive operator with its bound operands.
#[derive(Debug, Clone, PartialEq)]
pub enum MiOp {
    Bias(Vec<f32>),
    /// Residual add of a recorded skip tensor.
    Add(Matrix),
    Gelu,
    Relu,
    LayerNorm {
        gamma: Vec<f32>,
        beta: Vec<f32>,
    },
    Softmax,
}

impl MiOp {
    /// Width the op requires, if it binds one.
    fn width(&self) -> Option<usize> {
        match self {
            MiOp::Bias(b) => Some(b.len()),
            MiOp::Add(m) => Some(m.cols),
            MiOp::LayerNorm { gamma, .. } => Some(gamma.len()),
            _ => None,
        }
    }

    /// Applies the op in place to rows `row0..` of a strip of width `cols`.
    fn apply_rows(&self, strip: &mut [f32], row0: usize, cols: usize) {
        match self {
            MiOp::Bias(b) => {
                for row in strip.chunks_exact_mut(cols) {
                    for (x, &bv) in row.iter_mut().zip(b) {
                        *x += bv;
                    }
                }
            }
            MiOp::Add(skip) => {
                let off = row0 * cols;
                for (x, &s) in strip.iter_mut().zip(&skip.data[off..]) {
                    *x += s;
                }
            }
            MiOp::Gelu => strip.iter_mut().for_each(|x| *x = gelu(*x)),
            MiOp::Relu => strip.iter_mut().for_each(|x| *x = x.max(0.0)),
            MiOp::LayerNorm { gamma, beta } => {
                for row in strip.chunks_exact_mut(cols) {
                    let n = cols as f32;
                    let mean = row.iter().sum::<f32>() / n;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for ((x, g), b) in row.iter_mut().zip(gamma).zip(beta) {
                        *x = (*x - mean) * inv * g + b;
                    }
                }
            }
            MiOp::Softmax => {
                for row in strip.chunks_exact_mut(cols) {
                    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - m).exp();
                        sum += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= sum);
                }
            }
        }
    }
}

/// tanh approximation.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// One bound operator of a segment.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundOp {
    /// `x · w` with `w` of shape `inner × cols`.
    Gemm(Matrix),
    Mi(MiOp),
}

impl BoundOp {
    fn is_gemm(&self) -> bool {
        matches!(self, BoundOp::Gemm(_))
    }
}

/// Output width after running `ops` on an input of width `cols`, checking
/// every bound operand on the way.
fn check_shapes(ops: &[BoundOp], rows: usize, mut cols: usize) -> Result<usize> {
    for (k, op) in ops.iter().enumerate() {
        match op {
            BoundOp::Gemm(w) => {
                if w.rows != cols {
                    return Err(Error::Shape(format!(
                        "op {k}: GEMM weight has {} rows, input has {cols} columns",
                        w.rows
                    )));
                }
                cols = w.cols;
            }
            BoundOp::Mi(mi) => {
                if let Some(w) = mi.width() {
                    if w != cols {
                        return Err(Error::Shape(format!(
                            "op {k}: operand width {w}, input width {cols}"
                        )));
                    }
                }
                if let MiOp::Add(skip) = mi {
                    if skip.rows != rows {
                        return Err(Error::Shape(format!(
                            "op {k}: skip tensor has {} rows, input has {rows}",
                            skip.rows
                        )));
                    }
                }
            }
        }
    }
    Ok(cols)
}

/// `strip (r × a.cols) · w` into `out (r × w.cols)`, tiled over output
/// columns and the reduction.
fn tiled_gemm(strip: &[f32], r: usize, w: &Matrix, out: &mut [f32], tile_n: usize, tile_k: usize) {
    let (inner, cols) = (w.rows, w.cols);
    out.fill(0.0);
    for j0 in (0..cols).step_by(tile_n) {
        let j1 = (j0 + tile_n).min(cols);
        for k0 in (0..inner).step_by(tile_k) {
            let k1 = (k0 + tile_k).min(inner);
            for i in 0..r {
                let a_row = &strip[i * inner..(i + 1) * inner];
                let o_row = &mut out[i * cols + j0..i * cols + j1];
                for (k, &a) in a_row.iter().enumerate().take(k1).skip(k0) {
                    let w_row = &w.data[k * cols + j0..k * cols + j1];
                    for (o, &wv) in o_row.iter_mut().zip(w_row) {
                        *o += a * wv;
                    }
                }
            }
        }
    }
}

struct Tiling {
    strip_rows: usize,
    tile_n: usize,
    tile_k: usize,
    /// Strips produced per scheduling step; does not affect values.
    stage_depth: usize,
}

fn tiling_for(setting: &ParamSetting, cols: usize) -> Result<Tiling> {
    if setting.axes().contains(&0) {
        return Err(Error::InvalidParameter(format!(
            "zero tile size in {setting:?}"
        )));
    }
    let t = match *setting {
        ParamSetting::MiChain { chunk_size } => Tiling {
            strip_rows: (chunk_size / cols.max(1)).max(1),
            tile_n: usize::MAX,
            tile_k: usize::MAX,
            stage_depth: 1,
        },
        ParamSetting::CiMi {
            tile_m,
            tile_n,
            tile_k,
        } => Tiling {
            strip_rows: tile_m,
            tile_n,
            tile_k,
            stage_depth: 1,
        },
        ParamSetting::CiCi {
            tile_m,
            tile_n,
            tile_k,
            stage_depth,
        } => Tiling {
            strip_rows: tile_m,
            tile_n,
            tile_k,
            stage_depth,
        },
    };
    Ok(t)
}

/// Runs `ops` fused over row strips. `setting` must match the segment's
/// template kind.
pub fn exec_segment(ops: &[BoundOp], setting: &ParamSetting, input: &Matrix) -> Result<Matrix> {
    let gemms = ops.iter().filter(|o| o.is_gemm()).count();
    let kind = match gemms {
        0 => TemplateKind::MiChain,
        1 => TemplateKind::CiMi,
        2 => TemplateKind::CiCi,
        n => {
            return Err(Error::Backend(format!(
                "no template for a segment with {n} GEMMs"
            )));
        }
    };
    if setting.kind() != kind {
        return Err(Error::InvalidParameter(format!(
            "{:?} setting for a {kind:?} segment",
            setting.kind()
        )));
    }
    let rows = input.rows;
    let out_cols = check_shapes(ops, rows, input.cols)?;
    let t = tiling_for(setting, input.cols)?;
    let widest = ops
        .iter()
        .filter_map(|o| match o {
            BoundOp::Gemm(w) => Some(w.cols),
            _ => None,
        })
        .chain([input.cols])
        .max()
        .unwrap_or(input.cols);

    let mut out = Matrix::zeros(rows, out_cols);
    let step = t.strip_rows * t.stage_depth;
    let mut cur = vec![0.0f32; step * widest];
    let mut next = vec![0.0f32; step * widest];
    for r0 in (0..rows).step_by(step) {
        let r = step.min(rows - r0);
        let mut cols = input.cols;
        cur[..r * cols].copy_from_slice(&input.data[r0 * cols..(r0 + r) * cols]);
        for op in ops {
            match op {
                BoundOp::Gemm(w) => {
                    // each stage consumes strip_rows rows of the staged block
                    for s0 in (0..r).step_by(t.strip_rows) {
                        let s = t.strip_rows.min(r - s0);
                        tiled_gemm(
                            &cur[s0 * cols..(s0 + s) * cols],
                            s,
                            w,
                            &mut next[s0 * w.cols..(s0 + s) * w.cols],
                            t.tile_n,
                            t.tile_k,
                        );
                    }
                    cols = w.cols;
                    std::mem::swap(&mut cur, &mut next);
                }
                BoundOp::Mi(mi) => mi.apply_rows(&mut cur[..r * cols], r0, cols),
            }
        }
        out.data[r0 * out_cols..(r0 + r) * out_cols].copy_from_slice(&cur[..r * out_cols]);
    }
    Ok(out)
}

/// MI-only chain in chunks of about `chunk_size` elements.
pub fn exec_mi_chain(ops: &[MiOp], chunk_size: usize, input: &Matrix) -> Result<Matrix> {
    let bound: Vec<BoundOp> = ops.iter().cloned().map(BoundOp::Mi).collect();
    exec_segment(&bound, &ParamSetting::MiChain { chunk_size }, input)
}

/// One GEMM with optional MI prologue and epilogue.
pub fn exec_ci_mi(
    prologue: &[MiOp],
    gemm: &Matrix,
    epilogue: &[MiOp],
    setting: &ParamSetting,
    input: &Matrix,
) -> Result<Matrix> {
    let mut ops: Vec<BoundOp> = prologue.iter().cloned().map(BoundOp::Mi).collect();
    ops.push(BoundOp::Gemm(gemm.clone()));
    ops.extend(epilogue.iter().cloned().map(BoundOp::Mi));
    exec_segment(&ops, setting, input)
}

/// Two chained GEMMs; the intermediate exists only one staged strip at a time.
pub fn exec_ci_ci(
    gemm1: &Matrix,
    mid: &[MiOp],
    gemm2: &Matrix,
    epilogue: &[MiOp],
    setting: &ParamSetting,
    input: &Matrix,
) -> Result<Matrix> {
    let mut ops = vec![BoundOp::Gemm(gemm1.clone())];
    ops.extend(mid.iter().cloned().map(BoundOp::Mi));
    ops.push(BoundOp::Gemm(gemm2.clone()));
    ops.extend(epilogue.iter().cloned().map(BoundOp::Mi));
    exec_segment(&ops, setting, input)
}

/// Unfused reference: each op is one full pass over a materialised tensor.
/// GEMMs are naive triple loops.
pub fn exec_unfused(ops: &[BoundOp], input: &Matrix) -> Result<Matrix> {
    check_shapes(ops, input.rows, input.cols)?;
    let mut x = input.clone();
    for op in ops {
        x = match op {
            BoundOp::Gemm(w) => naive_gemm(&x, w),
            BoundOp::Mi(mi) => {
                let cols = x.cols;
                mi.apply_rows(&mut x.data, 0, cols);
                x
            }
        };
    }
    Ok(x)
}

pub fn naive_gemm(a: &Matrix, w: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows, w.cols);
    for i in 0..a.rows {
        for j in 0..w.cols {
            let mut acc = 0.0f32;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * w.data[k * w.cols + j];
            }
            out.data[i * w.cols + j] = acc;
        }
    }
    out
}
