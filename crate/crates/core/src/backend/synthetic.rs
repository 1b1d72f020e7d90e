//! Closed-form segment cost model.
//!
//! `cost(seg, setting) = launch + fused(seg) · param_factor(seg, setting)`
//!
//! * `fused(seg) = Σ base · discount[kind]^(len − 1)` when the segment lies
//!   inside one planted segment (or nothing is planted), and
//!   `Σ base · crossing_penalty` when it straddles a planted boundary.
//! * `param_factor = 1 + alpha · Σ_axes |log2 v − log2 p|`, where `p` is a
//!   per-segment planted point drawn from the default axis values, so the
//!   response is unimodal with its argmin at `p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{classify_segment, FusionScheme, OpGraph, OpKind, Segment, TemplateKind};
use crate::search::params::{DEFAULT_CHUNK_SIZES, DEFAULT_STAGE_DEPTHS, DEFAULT_TILES};
use crate::search::ParamSetting;

use super::{reject_mha, MeasurementBackend};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discounts {
    pub mi_chain: f64,
    pub ci_mi: f64,
    pub ci_ci: f64,
}

impl Default for Discounts {
    fn default() -> Self {
        Self {
            mi_chain: 0.6,
            ci_mi: 0.8,
            ci_ci: 0.9,
        }
    }
}

impl Discounts {
    pub fn uniform(d: f64) -> Self {
        Self {
            mi_chain: d,
            ci_mi: d,
            ci_ci: d,
        }
    }

    pub fn get(&self, kind: TemplateKind) -> f64 {
        match kind {
            TemplateKind::MiChain => self.mi_chain,
            TemplateKind::CiMi => self.ci_mi,
            TemplateKind::CiCi => self.ci_ci,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedScheme {
    pub segments: Vec<Segment>,
    pub crossing_penalty: f64,
}

impl PlantedScheme {
    pub fn new(scheme: &FusionScheme, crossing_penalty: f64) -> Self {
        Self {
            segments: scheme.segments.clone(),
            crossing_penalty,
        }
    }

    fn contains(&self, seg: Segment) -> bool {
        self.segments
            .iter()
            .any(|p| p.start <= seg.start && seg.end <= p.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCostModel {
    /// Explicit per-node base costs; derived from shapes when absent.
    pub op_costs: Option<Vec<f64>>,
    /// Multiply-adds count two flops.
    pub flop_rate: f64,
    pub byte_rate: f64,
    pub launch_overhead: f64,
    pub discount: Discounts,
    pub param_alpha: f64,
    pub param_seed: u64,
    pub planted: Option<PlantedScheme>,
}

impl Default for SyntheticCostModel {
    fn default() -> Self {
        Self {
            op_costs: None,
            flop_rate: 1e12,
            byte_rate: 2e11,
            launch_overhead: 5e-6,
            discount: Discounts::default(),
            param_alpha: 0.05,
            param_seed: 0,
            planted: None,
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn pick(values: &[usize], h: u64) -> usize {
    values[(h % values.len() as u64) as usize]
}

impl SyntheticCostModel {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn base_cost(&self, graph: &OpGraph, op: usize) -> f64 {
        if let Some(c) = &self.op_costs {
            return c[op];
        }
        let n = &graph.nodes[op];
        let (r, c, k) = (
            n.shape.rows as f64,
            n.shape.cols as f64,
            n.shape.inner as f64,
        );
        let bytes_per = 4.0;
        match n.kind {
            OpKind::Gemm | OpKind::MhaFused => {
                2.0 * r * c * k / self.flop_rate
                    + (r * k + k * c + r * c) * bytes_per / self.byte_rate
            }
            OpKind::Add => 3.0 * r * c * bytes_per / self.byte_rate,
            _ => 2.0 * r * c * bytes_per / self.byte_rate,
        }
    }

    /// The setting that minimises `param_factor` for `seg` over the default
    /// grid of `kind`.
    pub fn planted_setting(&self, seg: Segment, kind: TemplateKind) -> ParamSetting {
        let h = |axis: u64| {
            mix64(
                self.param_seed
                    ^ mix64((seg.start as u64) << 32 | seg.end as u64)
                    ^ mix64(axis + 1),
            )
        };
        match kind {
            TemplateKind::MiChain => ParamSetting::MiChain {
                chunk_size: pick(&DEFAULT_CHUNK_SIZES, h(0)),
            },
            TemplateKind::CiMi => ParamSetting::CiMi {
                tile_m: pick(&DEFAULT_TILES, h(1)),
                tile_n: pick(&DEFAULT_TILES, h(2)),
                tile_k: pick(&DEFAULT_TILES, h(3)),
            },
            TemplateKind::CiCi => ParamSetting::CiCi {
                tile_m: pick(&DEFAULT_TILES, h(1)),
                tile_n: pick(&DEFAULT_TILES, h(2)),
                tile_k: pick(&DEFAULT_TILES, h(3)),
                stage_depth: pick(&DEFAULT_STAGE_DEPTHS, h(4)),
            },
        }
    }

    pub fn param_factor(&self, seg: Segment, setting: &ParamSetting) -> f64 {
        let target = self.planted_setting(seg, setting.kind());
        let dist: f64 = setting
            .axes()
            .iter()
            .zip(target.axes())
            .map(|(&v, p)| ((v.max(1) as f64).log2() - (p as f64).log2()).abs())
            .sum();
        1.0 + self.param_alpha * dist
    }

    pub fn segment_cost(
        &self,
        graph: &OpGraph,
        seg: Segment,
        setting: &ParamSetting,
    ) -> Result<f64> {
        reject_mha(graph, seg)?;
        let kind = classify_segment(seg, graph)?;
        if setting.kind() != kind {
            return Err(Error::InvalidParameter(format!(
                "{:?} setting for {kind:?} segment {seg}",
                setting.kind()
            )));
        }
        let base: f64 = seg.ops().map(|op| self.base_cost(graph, op)).sum();
        let fused = match &self.planted {
            Some(p) if !p.contains(seg) => base * p.crossing_penalty,
            _ => base * self.discount.get(kind).powi(seg.len() as i32 - 1),
        };
        Ok(self.launch_overhead + fused * self.param_factor(seg, setting))
    }
}

impl MeasurementBackend for SyntheticCostModel {
    fn id(&self) -> String {
        "synthetic".into()
    }

    fn measure(
        &self,
        graph: &OpGraph,
        _scheme: &FusionScheme,
        segment: Segment,
        setting: &ParamSetting,
    ) -> Result<f64> {
        self.segment_cost(graph, segment, setting)
    }
}
