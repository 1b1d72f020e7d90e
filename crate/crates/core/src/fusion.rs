//! Linear operator chains, fusion schemes and the rules that grow them.
//!
//! A fusion scheme partitions the chain into contiguous segments. Its code
//! gives every operator one bit: all operators in a segment share a bit and
//! neighbouring segments alternate, so boundaries are wherever the bit flips.
//! The first segment is always `0`; a globally flipped code denotes the same
//! scheme.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Gemm,
    Bias,
    Add,
    LayerNorm,
    Gelu,
    Relu,
    Softmax,
    MhaFused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpCategory {
    /// Compute-intensive.
    Ci,
    /// Memory-intensive.
    Mi,
}

impl OpKind {
    pub fn category(self) -> OpCategory {
        match self {
            OpKind::Gemm | OpKind::MhaFused => OpCategory::Ci,
            _ => OpCategory::Mi,
        }
    }

    pub fn is_ci(self) -> bool {
        self.category() == OpCategory::Ci
    }

    /// Element-wise ops that a GEMM-chain template can absorb between its
    /// two products without a row reduction.
    pub fn is_simple_elementwise(self) -> bool {
        matches!(self, OpKind::Bias | OpKind::Gelu | OpKind::Relu)
    }
}

/// `(rows, cols, inner)`: output is `rows × cols`; `inner` is the reduction
/// length for GEMM-like ops and zero otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpShape {
    pub rows: usize,
    pub cols: usize,
    pub inner: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpNode {
    pub id: usize,
    pub kind: OpKind,
    pub shape: OpShape,
}

impl OpNode {
    pub fn category(&self) -> OpCategory {
        self.kind.category()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hyper {
    pub bs: usize,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub heads: usize,
}

impl Hyper {
    pub fn head_size(&self) -> usize {
        self.hidden_dim / self.heads.max(1)
    }

    pub fn tokens(&self) -> usize {
        self.bs * self.seq_len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpGraph {
    pub name: String,
    pub nodes: Vec<OpNode>,
    pub hyper: Hyper,
}

impl OpGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Builds a chain from kinds, propagating shapes: a GEMM maps the running
    /// width to `gemm_cols[k]` for the k-th GEMM (or keeps it when the list is
    /// exhausted), everything else keeps it.
    pub fn chain(name: &str, kinds: &[OpKind], hyper: Hyper, gemm_cols: &[usize]) -> Self {
        let rows = hyper.tokens();
        let mut width = hyper.hidden_dim;
        let mut gemms = 0;
        let nodes = kinds
            .iter()
            .enumerate()
            .map(|(id, &kind)| {
                let shape = match kind {
                    OpKind::Gemm => {
                        let cols = gemm_cols.get(gemms).copied().unwrap_or(width);
                        gemms += 1;
                        let s = OpShape {
                            rows,
                            cols,
                            inner: width,
                        };
                        width = cols;
                        s
                    }
                    OpKind::MhaFused => OpShape {
                        rows,
                        cols: width,
                        inner: width,
                    },
                    _ => OpShape {
                        rows,
                        cols: width,
                        inner: 0,
                    },
                };
                OpNode { id, kind, shape }
            })
            .collect();
        Self {
            name: name.to_string(),
            nodes,
            hyper,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut width: Option<usize> = None;
        for (k, n) in self.nodes.iter().enumerate() {
            if n.id != k {
                return Err(Error::InvalidParameter(format!(
                    "node {k} carries id {}",
                    n.id
                )));
            }
            let input = if n.kind.is_ci() {
                n.shape.inner
            } else {
                n.shape.cols
            };
            if let Some(w) = width {
                if input != w {
                    return Err(Error::Shape(format!(
                        "node {k} ({:?}) expects width {input}, chain provides {w}",
                        n.kind
                    )));
                }
            }
            if k > 0 && n.shape.rows != self.nodes[0].shape.rows {
                return Err(Error::Shape(format!("node {k} changes the row count")));
            }
            width = Some(n.shape.cols);
        }
        Ok(())
    }

    fn ci_count(&self, seg: Segment) -> usize {
        self.nodes[seg.start..seg.end]
            .iter()
            .filter(|n| n.kind.is_ci())
            .count()
    }

    fn has_mha(&self, seg: Segment) -> bool {
        self.nodes[seg.start..seg.end]
            .iter()
            .any(|n| n.kind == OpKind::MhaFused)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    BertLayer,
    GptLayer,
    T5Layer,
}

impl FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "bert-layer" | "bert" => Ok(ModelPreset::BertLayer),
            "gpt-layer" | "gpt" => Ok(ModelPreset::GptLayer),
            "t5-layer" | "t5" => Ok(ModelPreset::T5Layer),
            other => Err(Error::InvalidParameter(format!(
                "unknown model preset `{other}`"
            ))),
        }
    }
}

/// One transformer layer as a linear chain.
///
/// * `BertLayer` (post-norm, 12 ops): MHA, projection GEMM + bias, residual
///   add, LayerNorm, FFN GEMM + bias + GELU, GEMM + bias, residual add,
///   LayerNorm.
/// * `GptLayer` (pre-norm, 12 ops): LayerNorm before the MHA and before the
///   FFN; the chain ends on the second residual add.
/// * `T5Layer` (decoder block, 13 ops): pre-norm self-attention and
///   cross-attention sub-blocks plus a ReLU FFN, no bias terms.
///
/// The FFN expands to `4 · hidden_dim`.
pub fn build_preset_graph(model: ModelPreset, hyper: Hyper) -> OpGraph {
    use OpKind::*;
    let h = hyper.hidden_dim;
    let f = 4 * h;
    let (name, kinds, cols): (&str, Vec<OpKind>, Vec<usize>) = match model {
        ModelPreset::BertLayer => (
            "bert-layer",
            vec![
                MhaFused, Gemm, Bias, Add, LayerNorm, Gemm, Bias, Gelu, Gemm, Bias, Add, LayerNorm,
            ],
            vec![h, f, h],
        ),
        ModelPreset::GptLayer => (
            "gpt-layer",
            vec![
                LayerNorm, MhaFused, Gemm, Bias, Add, LayerNorm, Gemm, Bias, Gelu, Gemm, Bias, Add,
            ],
            vec![h, f, h],
        ),
        ModelPreset::T5Layer => (
            "t5-layer",
            vec![
                LayerNorm, MhaFused, Gemm, Add, LayerNorm, MhaFused, Gemm, Add, LayerNorm, Gemm,
                Relu, Gemm, Add,
            ],
            vec![h, h, f, h],
        ),
    };
    OpGraph::chain(name, &kinds, hyper, &cols)
}

/// Half-open operator range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn ops(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len() == 1 {
            write!(f, "[{}]", self.start)
        } else {
            write!(f, "[{}..{}]", self.start, self.end - 1)
        }
    }
}

/// Alternating bit string; maximal equal-bit runs are the segments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SchemeCode(Vec<bool>);

impl SchemeCode {
    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flipped(&self) -> Self {
        Self(self.0.iter().map(|b| !b).collect())
    }

    /// Representative with a leading zero.
    pub fn canonical(&self) -> Self {
        if self.0.first() == Some(&true) {
            self.flipped()
        } else {
            self.clone()
        }
    }

    pub fn equivalent(&self, other: &SchemeCode) -> bool {
        self.canonical() == other.canonical()
    }

    /// Bits read MSB-first, left-padded with zeros to whole nibbles.
    pub fn to_hex(&self) -> String {
        let pad = (4 - self.0.len() % 4) % 4;
        let padded: Vec<bool> = std::iter::repeat_n(false, pad)
            .chain(self.0.iter().copied())
            .collect();
        padded
            .chunks(4)
            .map(|n| {
                let v = n.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32);
                char::from_digit(v, 16).unwrap()
            })
            .collect()
    }

    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        let hex = hex.trim_start_matches("0x");
        let mut bits = Vec::with_capacity(hex.len() * 4);
        for ch in hex.chars() {
            let v = ch
                .to_digit(16)
                .ok_or_else(|| Error::InvalidParameter(format!("bad hex digit `{ch}`")))?;
            bits.extend((0..4).rev().map(|k| v >> k & 1 == 1));
        }
        if bits.len() < len || bits[..bits.len() - len].iter().any(|&b| b) {
            return Err(Error::InvalidParameter(format!(
                "hex code does not fit in {len} bits"
            )));
        }
        Ok(Self(bits[bits.len() - len..].to_vec()))
    }
}

impl fmt::Display for SchemeCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for SchemeCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::InvalidParameter("empty scheme code".into()));
        }
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidParameter(format!(
                    "scheme code digit `{other}`"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(SchemeCode)
    }
}

impl Serialize for SchemeCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SchemeCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Segment `k` gets bit `k mod 2`.
pub fn encode(scheme: &FusionScheme) -> SchemeCode {
    let mut bits = Vec::new();
    for (k, seg) in scheme.segments.iter().enumerate() {
        bits.extend(std::iter::repeat_n(k % 2 == 1, seg.len()));
    }
    SchemeCode(bits)
}

/// Maximal runs of equal bits.
pub fn decode(code: &SchemeCode) -> Vec<Segment> {
    let mut segs = Vec::new();
    let mut start = 0;
    for i in 1..=code.len() {
        if i == code.len() || code.0[i] != code.0[i - 1] {
            segs.push(Segment::new(start, i));
            start = i;
        }
    }
    segs
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FusionScheme {
    pub segments: Vec<Segment>,
}

impl FusionScheme {
    /// Checks that `segments` partition `0..n` in order.
    pub fn new(segments: Vec<Segment>, n: usize) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.start != next || s.is_empty() {
                return Err(Error::IllegalScheme(format!(
                    "segments do not partition 0..{n} in order at {s}"
                )));
            }
            next = s.end;
        }
        if next != n {
            return Err(Error::IllegalScheme(format!(
                "segments cover 0..{next}, expected 0..{n}"
            )));
        }
        Ok(Self { segments })
    }

    pub fn unfused(n: usize) -> Self {
        Self {
            segments: (0..n).map(|i| Segment::new(i, i + 1)).collect(),
        }
    }

    pub fn from_code(code: &SchemeCode) -> Self {
        Self {
            segments: decode(code),
        }
    }

    /// Segments given as run lengths, e.g. `[1, 5, 3]`.
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        let mut start = 0;
        let mut segs = Vec::with_capacity(lengths.len());
        for &l in lengths {
            segs.push(Segment::new(start, start + l));
            start += l;
        }
        Self::new(segs, start)
    }

    pub fn code(&self) -> SchemeCode {
        encode(self)
    }

    pub fn n_ops(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn segment_of(&self, op: usize) -> Option<usize> {
        self.segments.iter().position(|s| s.ops().contains(&op))
    }

    /// Partition, at most two CI ops per segment, MHA nodes isolated.
    pub fn validate(&self, graph: &OpGraph) -> Result<()> {
        Self::new(self.segments.clone(), graph.len())?;
        for &s in &self.segments {
            if graph.has_mha(s) && s.len() != 1 {
                return Err(Error::IllegalSegment {
                    start: s.start,
                    end: s.end,
                    reason: "MhaFused must stay a singleton segment".into(),
                });
            }
            let ci = graph.ci_count(s);
            if ci > 2 {
                return Err(Error::IllegalSegment {
                    start: s.start,
                    end: s.end,
                    reason: format!("{ci} compute-intensive ops (at most 2)"),
                });
            }
        }
        Ok(())
    }

    pub fn is_legal(&self, graph: &OpGraph) -> bool {
        self.validate(graph).is_ok()
    }

    /// Segments that go through the downstream tuner (everything except the
    /// frozen MHA kernels).
    pub fn tunable_segments<'a>(
        &'a self,
        graph: &'a OpGraph,
    ) -> impl Iterator<Item = Segment> + 'a {
        self.segments
            .iter()
            .copied()
            .filter(move |&s| !graph.has_mha(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateKind {
    MiChain,
    CiMi,
    CiCi,
}

pub fn classify_segment(segment: Segment, graph: &OpGraph) -> Result<TemplateKind> {
    if segment.is_empty() || segment.end > graph.len() {
        return Err(Error::IllegalSegment {
            start: segment.start,
            end: segment.end,
            reason: format!("outside the {}-op chain", graph.len()),
        });
    }
    match graph.ci_count(segment) {
        0 => Ok(TemplateKind::MiChain),
        1 => Ok(TemplateKind::CiMi),
        2 => Ok(TemplateKind::CiCi),
        n => Err(Error::IllegalSegment {
            start: segment.start,
            end: segment.end,
            reason: format!("{n} compute-intensive ops (at most 2)"),
        }),
    }
}

/// One legal step of fusion growth. Indices refer to segments of the scheme
/// the transition was generated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transition {
    /// Merge segment `left` with segment `left + 1`.
    Expand { left: usize },
    /// Segment `taker` takes boundary op `op` from the MI-only neighbour `source`.
    Seize {
        taker: usize,
        source: usize,
        op: usize,
    },
    /// Two CI-bearing segments flank a single MI op; `winner` takes it.
    Compete {
        winner: usize,
        loser: usize,
        op: usize,
    },
}

impl Transition {
    fn rank(&self) -> (u8, usize) {
        match *self {
            Transition::Expand { left } => (0, left),
            Transition::Seize { taker, source, .. } => (1, taker.min(source)),
            Transition::Compete { winner, loser, .. } => (2, winner.min(loser)),
        }
    }

    pub fn apply(&self, scheme: &FusionScheme) -> FusionScheme {
        let mut segs = scheme.segments.clone();
        match *self {
            Transition::Expand { left } => {
                segs[left].end = segs[left + 1].end;
                segs.remove(left + 1);
            }
            Transition::Seize { taker, source, .. } => move_boundary(&mut segs, taker, source),
            Transition::Compete { winner, op, .. } => {
                let source = scheme.segment_of(op).expect("op inside scheme");
                move_boundary(&mut segs, winner, source);
            }
        }
        FusionScheme { segments: segs }
    }
}

fn move_boundary(segs: &mut Vec<Segment>, taker: usize, source: usize) {
    if taker + 1 == source {
        segs[taker].end += 1;
        segs[source].start += 1;
    } else {
        segs[taker].start -= 1;
        segs[source].end -= 1;
    }
    if segs[source].is_empty() {
        segs.remove(source);
    }
}

/// Every legal single-step transition, ordered expand < seize < compete and
/// then by leftmost segment.
pub fn transitions(scheme: &FusionScheme, graph: &OpGraph) -> Vec<Transition> {
    let segs = &scheme.segments;
    let mut out = Vec::new();

    for left in 0..segs.len().saturating_sub(1) {
        let (a, b) = (segs[left], segs[left + 1]);
        if graph.has_mha(a) || graph.has_mha(b) {
            continue;
        }
        if graph.ci_count(a) + graph.ci_count(b) <= 2 {
            out.push(Transition::Expand { left });
        }
    }

    let can_seize = |k: usize| graph.ci_count(segs[k]) >= 1 && !graph.has_mha(segs[k]);
    for (m, &seg) in segs.iter().enumerate() {
        if graph.ci_count(seg) != 0 {
            continue;
        }
        let left = (m > 0 && can_seize(m - 1)).then(|| m - 1);
        let right = (m + 1 < segs.len() && can_seize(m + 1)).then_some(m + 1);
        match (left, right) {
            (Some(l), Some(r)) if seg.len() == 1 => {
                let l_one = graph.ci_count(segs[l]) == 1;
                let r_one = graph.ci_count(segs[r]) == 1;
                let (winner, loser) = if r_one && !l_one { (r, l) } else { (l, r) };
                out.push(Transition::Compete {
                    winner,
                    loser,
                    op: seg.start,
                });
            }
            _ => {
                if let Some(l) = left {
                    out.push(Transition::Seize {
                        taker: l,
                        source: m,
                        op: seg.start,
                    });
                }
                if let Some(r) = right {
                    out.push(Transition::Seize {
                        taker: r,
                        source: m,
                        op: seg.end - 1,
                    });
                }
            }
        }
    }

    out.sort_by_key(|t| t.rank());
    out
}

/// Every legal scheme of the chain, by enumerating all boundary subsets.
/// Exponential; meant for chains of a dozen ops or fewer.
pub fn enumerate_legal_schemes(graph: &OpGraph) -> Vec<FusionScheme> {
    let n = graph.len();
    if n == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for mask in 0u64..(1u64 << (n - 1)) {
        let mut segs = Vec::new();
        let mut start = 0;
        for i in 1..n {
            if mask >> (i - 1) & 1 == 1 {
                segs.push(Segment::new(start, i));
                start = i;
            }
        }
        segs.push(Segment::new(start, n));
        let s = FusionScheme { segments: segs };
        if s.is_legal(graph) {
            out.push(s);
        }
    }
    out
}

/// Closure of `transitions` from `start`.
pub fn reachable_schemes(start: &FusionScheme, graph: &OpGraph) -> BTreeSet<FusionScheme> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![start.clone()];
    while let Some(s) = stack.pop() {
        if !seen.insert(s.clone()) {
            continue;
        }
        for t in transitions(&s, graph) {
            let next = t.apply(&s);
            if !seen.contains(&next) {
                stack.push(next);
            }
        }
    }
    seen
}

/// JSON form of a scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeDoc {
    pub code: SchemeCode,
    pub hex: String,
    pub length: usize,
    /// Inclusive `[first, last]` operator ids per segment.
    pub segments: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<Vec<Option<TemplateKind>>>,
}

impl SchemeDoc {
    pub fn new(scheme: &FusionScheme, graph: Option<&OpGraph>) -> Self {
        let code = scheme.code();
        Self {
            hex: code.to_hex(),
            length: code.len(),
            code,
            segments: scheme
                .segments
                .iter()
                .map(|s| [s.start, s.end - 1])
                .collect(),
            templates: graph.map(|g| {
                scheme
                    .segments
                    .iter()
                    .map(|&s| {
                        if g.has_mha(s) {
                            None
                        } else {
                            classify_segment(s, g).ok()
                        }
                    })
                    .collect()
            }),
        }
    }
}
