//! Wall-clock backend over the fused CPU executors.
//!
//! Operands and segment inputs are drawn once per `(graph, seed)` and reused
//! by every measurement. Timing: `warmups` untimed runs, then the minimum of
//! `repeats` runs on the monotonic clock.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{FusionScheme, OpGraph, OpKind, Segment};
use crate::search::{ParamAssignment, ParamSetting};

use super::exec::{exec_segment, BoundOp, Matrix, MiOp};
use super::{reject_mha, setting_or_default, MeasurementBackend};

pub const DEFAULT_WARMUPS: usize = 3;
pub const DEFAULT_REPEATS: usize = 10;

/// Bound operands for every node plus one input tensor per node.
pub struct GraphData {
    pub ops: Vec<Option<BoundOp>>,
    pub inputs: Vec<Matrix>,
}

impl GraphData {
    pub fn generate(graph: &OpGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, scale: f32| -> Vec<f32> {
            (0..n).map(|_| rng.random_range(-scale..scale)).collect()
        };
        let mut ops = Vec::with_capacity(graph.len());
        let mut inputs = Vec::with_capacity(graph.len());
        for n in &graph.nodes {
            let (rows, cols, inner) = (n.shape.rows, n.shape.cols, n.shape.inner);
            let in_cols = if n.kind.is_ci() { inner } else { cols };
            inputs.push(Matrix {
                rows,
                cols: in_cols,
                data: uniform(rows * in_cols, 1.0),
            });
            let op = match n.kind {
                OpKind::Gemm => Some(BoundOp::Gemm(Matrix {
                    rows: inner,
                    cols,
                    data: uniform(inner * cols, 1.0 / (inner as f32).sqrt()),
                })),
                OpKind::Bias => Some(BoundOp::Mi(MiOp::Bias(uniform(cols, 0.5)))),
                OpKind::Add => Some(BoundOp::Mi(MiOp::Add(Matrix {
                    rows,
                    cols,
                    data: uniform(rows * cols, 1.0),
                }))),
                OpKind::LayerNorm => Some(BoundOp::Mi(MiOp::LayerNorm {
                    gamma: uniform(cols, 0.1).into_iter().map(|g| 1.0 + g).collect(),
                    beta: uniform(cols, 0.1),
                })),
                OpKind::Gelu => Some(BoundOp::Mi(MiOp::Gelu)),
                OpKind::Relu => Some(BoundOp::Mi(MiOp::Relu)),
                OpKind::Softmax => Some(BoundOp::Mi(MiOp::Softmax)),
                OpKind::MhaFused => None,
            };
            ops.push(op);
        }
        Self { ops, inputs }
    }

    pub fn segment_ops(&self, segment: Segment) -> Result<Vec<BoundOp>> {
        self.ops[segment.ops()]
            .iter()
            .map(|o| {
                o.clone()
                    .ok_or_else(|| Error::Backend(format!("segment {segment} has no CPU executor")))
            })
            .collect()
    }
}

/// Minimum of `repeats` timed runs after `warmups` untimed ones, in seconds.
pub fn time_best(warmups: usize, repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmups {
        f()?;
    }
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

pub struct CpuBackend {
    pub seed: u64,
    pub warmups: usize,
    pub repeats: usize,
    data: Mutex<HashMap<String, Arc<GraphData>>>,
}

impl CpuBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            warmups: DEFAULT_WARMUPS,
            repeats: DEFAULT_REPEATS,
            data: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_protocol(mut self, warmups: usize, repeats: usize) -> Self {
        self.warmups = warmups;
        self.repeats = repeats;
        self
    }

    pub fn graph_data(&self, graph: &OpGraph) -> Arc<GraphData> {
        let key = serde_json::to_string(graph).expect("graph serialises");
        let mut map = self.data.lock().expect("graph data lock");
        map.entry(key)
            .or_insert_with(|| {
                let digest = Sha256::digest(serde_json::to_vec(graph).expect("graph serialises"));
                let salt = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
                Arc::new(GraphData::generate(graph, self.seed ^ salt))
            })
            .clone()
    }

    /// Runs the tunable segments in order; a segment continues from its
    /// predecessor's output unless an MHA node sits between them.
    pub fn run_chain(
        &self,
        graph: &OpGraph,
        scheme: &FusionScheme,
        assignment: &ParamAssignment,
    ) -> Result<Matrix> {
        let data = self.graph_data(graph);
        let plan = self.chain_plan(graph, scheme, assignment, &data)?;
        run_plan(&plan, &data)
    }

    fn chain_plan(
        &self,
        graph: &OpGraph,
        scheme: &FusionScheme,
        assignment: &ParamAssignment,
        data: &GraphData,
    ) -> Result<Vec<(Segment, Vec<BoundOp>, ParamSetting)>> {
        scheme
            .tunable_segments(graph)
            .map(|seg| {
                Ok((
                    seg,
                    data.segment_ops(seg)?,
                    setting_or_default(graph, seg, assignment)?,
                ))
            })
            .collect()
    }
}

fn run_plan(plan: &[(Segment, Vec<BoundOp>, ParamSetting)], data: &GraphData) -> Result<Matrix> {
    let mut prev: Option<(usize, Matrix)> = None;
    for (seg, ops, setting) in plan {
        let input = match &prev {
            Some((end, m)) if *end == seg.start => m,
            _ => &data.inputs[seg.start],
        };
        let out = exec_segment(ops, setting, input)?;
        prev = Some((seg.end, out));
    }
    prev.map(|(_, m)| m)
        .ok_or_else(|| Error::Backend("scheme has no executable segment".into()))
}

impl MeasurementBackend for CpuBackend {
    fn id(&self) -> String {
        format!("cpu-seed{}", self.seed)
    }

    fn measure(
        &self,
        graph: &OpGraph,
        _scheme: &FusionScheme,
        segment: Segment,
        setting: &ParamSetting,
    ) -> Result<f64> {
        reject_mha(graph, segment)?;
        let data = self.graph_data(graph);
        let ops = data.segment_ops(segment)?;
        let input = &data.inputs[segment.start];
        time_best(self.warmups, self.repeats, || {
            exec_segment(&ops, setting, input).map(drop)
        })
    }

    fn end_to_end(
        &self,
        graph: &OpGraph,
        scheme: &FusionScheme,
        assignment: &ParamAssignment,
    ) -> Result<f64> {
        let data = self.graph_data(graph);
        let plan = self.chain_plan(graph, scheme, assignment, &data)?;
        time_best(self.warmups, self.repeats, || {
            run_plan(&plan, &data).map(drop)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::exec::exec_unfused;
    use crate::fusion::{build_preset_graph, Hyper, ModelPreset};

    fn small_bert() -> OpGraph {
        build_preset_graph(
            ModelPreset::BertLayer,
            Hyper {
                bs: 1,
                seq_len: 16,
                hidden_dim: 16,
                heads: 2,
            },
        )
    }

    #[test]
    fn fused_chain_matches_unfused_chain() {
        let g = small_bert();
        let b = CpuBackend::new(1);
        let fused = b
            .run_chain(
                &g,
                &FusionScheme::from_lengths(&[1, 4, 3, 4]).unwrap(),
                &ParamAssignment::default(),
            )
            .unwrap();
        let data = b.graph_data(&g);
        let all: Vec<BoundOp> = data.ops[1..].iter().map(|o| o.clone().unwrap()).collect();
        let want = exec_unfused(&all, &data.inputs[1]).unwrap();
        assert!(fused.max_abs_diff(&want) < 1e-3);
    }

    #[test]
    fn mha_segment_is_not_measurable() {
        let g = small_bert();
        let b = CpuBackend::new(1).with_protocol(0, 1);
        let s = FusionScheme::unfused(g.len());
        let err = b
            .measure(
                &g,
                &s,
                Segment::new(0, 1),
                &ParamSetting::MiChain { chunk_size: 256 },
            )
            .unwrap_err();
        assert_eq!(err.kind(), "backend-error");
        assert!(b.end_to_end(&g, &s, &ParamAssignment::default()).unwrap() > 0.0);
    }
}
