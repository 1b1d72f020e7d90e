//! Measurement backends consumed by the tuner.
//!
//! [`CpuBackend`] times fused row-strip executors on seeded tensors.
//! [`SyntheticCostModel`] is a closed-form, noise-free stand-in with an
//! optional planted optimum.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::fusion::{classify_segment, FusionScheme, OpGraph, OpKind, Segment};
use crate::search::{ParamAssignment, ParamSetting};

pub mod cpu;
pub mod exec;
pub mod synthetic;

pub use cpu::CpuBackend;
pub use synthetic::{Discounts, PlantedScheme, SyntheticCostModel};

pub trait MeasurementBackend: Send + Sync {
    /// Stable identifier; part of the persisted cache key.
    fn id(&self) -> String;

    /// Seconds for one segment under one setting. MHA segments are not
    /// measurable and return a backend error.
    fn measure(
        &self,
        graph: &OpGraph,
        scheme: &FusionScheme,
        segment: Segment,
        setting: &ParamSetting,
    ) -> Result<f64>;

    /// Seconds for every tunable segment of `scheme`. Segments missing from
    /// `assignment` run on the template default.
    fn end_to_end(
        &self,
        graph: &OpGraph,
        scheme: &FusionScheme,
        assignment: &ParamAssignment,
    ) -> Result<f64> {
        let mut total = 0.0;
        for seg in scheme.tunable_segments(graph) {
            let setting = setting_or_default(graph, seg, assignment)?;
            total += self.measure(graph, scheme, seg, &setting)?;
        }
        Ok(total)
    }
}

pub fn setting_or_default(
    graph: &OpGraph,
    segment: Segment,
    assignment: &ParamAssignment,
) -> Result<ParamSetting> {
    match assignment.get(segment) {
        Some(s) => Ok(*s),
        None => Ok(ParamSetting::default_for(classify_segment(segment, graph)?)),
    }
}

pub(crate) fn reject_mha(graph: &OpGraph, segment: Segment) -> Result<()> {
    if segment.end > graph.len() || segment.is_empty() {
        return Err(Error::Backend(format!(
            "segment {segment} outside the {}-op chain",
            graph.len()
        )));
    }
    if graph.nodes[segment.ops()]
        .iter()
        .any(|n| n.kind == OpKind::MhaFused)
    {
        return Err(Error::Backend(format!(
            "segment {segment} holds the MHA kernel, which is not measured here"
        )));
    }
    Ok(())
}

/// Counts `measure` calls made through it.
pub struct CountingBackend<B> {
    pub inner: B,
    calls: AtomicUsize,
}

impl<B> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: MeasurementBackend> MeasurementBackend for CountingBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn measure(
        &self,
        graph: &OpGraph,
        scheme: &FusionScheme,
        segment: Segment,
        setting: &ParamSetting,
    ) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.measure(graph, scheme, segment, setting)
    }

    fn end_to_end(
        &self,
        graph: &OpGraph,
        scheme: &FusionScheme,
        assignment: &ParamAssignment,
    ) -> Result<f64> {
        self.inner.end_to_end(graph, scheme, assignment)
    }
}
