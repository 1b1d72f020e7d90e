//! Two-stage tuner.
//!
//! Stage 1 grows the fusion scheme depth-first along rule transitions. A
//! scheme's estimate is the sum over its tunable segments of the best of the
//! first K settings of that segment's sampling order. A transition is kept,
//! and searched further, when its result beats the scheme it was applied to
//! by more than `accept_threshold` (relative); otherwise the search rolls
//! back and tries the next transition. The best scheme seen wins.
//!
//! Stage 2 keeps the scheme fixed and spends B evaluations per iteration,
//! continuing each segment's sampling order. The segment whose best duration
//! dropped most gets its share multiplied by `reward_boost`.
//!
//! MHA segments are frozen and never measured; all durations cover the
//! downstream chain only.

use std::collections::{BTreeSet, HashMap};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::MeasurementBackend;
use crate::error::{Error, Result};
use crate::fusion::{
    classify_segment, transitions, FusionScheme, Hyper, OpGraph, OpKind, SchemeCode, SchemeDoc,
    Segment, TemplateKind,
};
use crate::kernel::{select_plan, HardwareSpec, KernelPlan};
use crate::mask::DenseMask;

pub mod cache;
pub mod params;

pub use cache::{cache_file_key, CacheKey, TuningCache};
pub use params::{ParamAssignment, ParamSetting, ParamSpace, SegmentSetting};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// K: settings sampled per segment when estimating a scheme.
    pub samples_per_eval: usize,
    /// B: evaluations per stage-2 iteration.
    pub stage2_budget_per_iter: usize,
    /// R: maximum stage-2 iterations.
    pub stage2_iters: usize,
    pub reward_boost: f64,
    pub seed: u64,
    /// Chains with `bs · seq_len` at or below this start with GEMM pairs fused.
    pub small_input_rule: usize,
    /// Minimum relative gain for accepting a stage-1 transition.
    pub accept_threshold: f64,
    pub params: ParamSpace,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            samples_per_eval: 4,
            stage2_budget_per_iter: 16,
            stage2_iters: 8,
            reward_boost: 1.5,
            seed: 0,
            small_input_rule: 4096,
            accept_threshold: 0.01,
            params: ParamSpace::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_eval == 0 || self.stage2_iters == 0 || self.stage2_budget_per_iter == 0
        {
            return Err(Error::InvalidParameter(
                "K, B and R must be at least 1".into(),
            ));
        }
        if !(self.reward_boost >= 1.0 && self.reward_boost.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "reward_boost {} must be a finite value >= 1",
                self.reward_boost
            )));
        }
        if !(0.0..1.0).contains(&self.accept_threshold) {
            return Err(Error::InvalidParameter(format!(
                "accept_threshold {} outside [0, 1)",
                self.accept_threshold
            )));
        }
        Ok(())
    }
}

/// Initial partition from operator roles and input size.
///
/// MHA nodes are singletons. For small inputs two GEMMs separated only by
/// simple element-wise ops form one CI-CI segment together with a directly
/// following Bias. Each remaining GEMM takes a directly following Bias. MI
/// runs left over form MI chains.
pub fn init_scheme(graph: &OpGraph, config: &SearchConfig) -> FusionScheme {
    let n = graph.len();
    let kinds: Vec<OpKind> = graph.nodes.iter().map(|n| n.kind).collect();
    let small = graph.hyper.tokens() <= config.small_input_rule;
    let mut segs = Vec::new();
    let mut mi_start: Option<usize> = None;
    let mut i = 0;
    let flush = |segs: &mut Vec<Segment>, mi_start: &mut Option<usize>, at: usize| {
        if let Some(s) = mi_start.take() {
            segs.push(Segment::new(s, at));
        }
    };
    while i < n {
        match kinds[i] {
            OpKind::MhaFused => {
                flush(&mut segs, &mut mi_start, i);
                segs.push(Segment::new(i, i + 1));
                i += 1;
            }
            OpKind::Gemm => {
                flush(&mut segs, &mut mi_start, i);
                let mut end = i + 1;
                if small {
                    let mut j = i + 1;
                    while j < n && kinds[j].is_simple_elementwise() {
                        j += 1;
                    }
                    if j < n && kinds[j] == OpKind::Gemm {
                        end = j + 1;
                    }
                }
                if end < n && kinds[end] == OpKind::Bias {
                    end += 1;
                }
                segs.push(Segment::new(i, end));
                i = end;
            }
            _ => {
                mi_start.get_or_insert(i);
                i += 1;
            }
        }
    }
    flush(&mut segs, &mut mi_start, n);
    FusionScheme { segments: segs }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    /// Backend `measure` calls (cache misses that were measured).
    pub measurements: usize,
    pub cache_hits: usize,
    pub evaluations: usize,
    pub stage1_candidates: usize,
    pub stage1_accepted: usize,
    pub stage1_skipped: usize,
    /// Estimate of the initial scheme, then of every new incumbent.
    pub accepted_estimates: Vec<f64>,
    /// Evaluations issued per stage-2 iteration.
    pub stage2_evaluations: Vec<usize>,
    /// New measurements per stage-2 iteration.
    pub stage2_measurements: Vec<usize>,
    #[serde(skip)]
    pub evaluated_schemes: Vec<FusionScheme>,
}

impl SearchStats {
    pub fn cache_hit_rate(&self) -> f64 {
        if self.evaluations == 0 {
            0.0
        } else {
            self.cache_hits as f64 / self.evaluations as f64
        }
    }
}

/// One tuning session over a graph. Holds the sampling cursors, so stage 2
/// continues where stage 1 stopped.
pub struct Tuner<'a> {
    graph: &'a OpGraph,
    backend: &'a dyn MeasurementBackend,
    cache: &'a mut TuningCache,
    config: &'a SearchConfig,
    pub stats: SearchStats,
    orders: HashMap<Segment, Vec<ParamSetting>>,
    cursor: HashMap<Segment, usize>,
    best: HashMap<Segment, (f64, ParamSetting)>,
    untuned: BTreeSet<Segment>,
}

fn segment_seed(seed: u64, seg: Segment) -> u64 {
    let mut z =
        seed ^ ((seg.start as u64) << 32 | seg.end as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 31)
}

impl<'a> Tuner<'a> {
    pub fn new(
        graph: &'a OpGraph,
        backend: &'a dyn MeasurementBackend,
        cache: &'a mut TuningCache,
        config: &'a SearchConfig,
    ) -> Result<Self> {
        config.validate()?;
        graph.validate()?;
        Ok(Self {
            graph,
            backend,
            cache,
            config,
            stats: SearchStats::default(),
            orders: HashMap::new(),
            cursor: HashMap::new(),
            best: HashMap::new(),
            untuned: BTreeSet::new(),
        })
    }

    pub fn untuned_segments(&self) -> &BTreeSet<Segment> {
        &self.untuned
    }

    /// Seeded permutation of the segment's grid; the template default alone
    /// when the grid is empty.
    fn order(&mut self, seg: Segment) -> Result<&[ParamSetting]> {
        if !self.orders.contains_key(&seg) {
            let kind = classify_segment(seg, self.graph)?;
            let mut grid = self.config.params.grid(kind).to_vec();
            if grid.is_empty() {
                self.untuned.insert(seg);
                grid.push(ParamSetting::default_for(kind));
            }
            grid.shuffle(&mut ChaCha8Rng::seed_from_u64(segment_seed(
                self.config.seed,
                seg,
            )));
            self.orders.insert(seg, grid);
        }
        Ok(&self.orders[&seg])
    }

    fn evaluate(
        &mut self,
        scheme: &FusionScheme,
        seg: Segment,
        setting: ParamSetting,
    ) -> Result<f64> {
        self.stats.evaluations += 1;
        let key = CacheKey {
            segment: seg,
            setting,
        };
        let secs = match self.cache.lookup(&key) {
            Some(v) => {
                self.stats.cache_hits += 1;
                v
            }
            None => {
                let v = self.backend.measure(self.graph, scheme, seg, &setting)?;
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Backend(format!(
                        "segment {seg} measured {v} seconds"
                    )));
                }
                self.cache.insert(key, v)?;
                self.stats.measurements += 1;
                v
            }
        };
        let best = self.best.entry(seg).or_insert((f64::INFINITY, setting));
        if secs < best.0 {
            *best = (secs, setting);
        }
        Ok(secs)
    }

    /// Best of the first K settings of the segment's order.
    fn segment_estimate(&mut self, scheme: &FusionScheme, seg: Segment) -> Result<f64> {
        let k = self.config.samples_per_eval;
        let head: Vec<ParamSetting> = self.order(seg)?.iter().take(k).copied().collect();
        let mut best = f64::INFINITY;
        for s in &head {
            best = best.min(self.evaluate(scheme, seg, *s)?);
        }
        let c = self.cursor.entry(seg).or_insert(0);
        *c = (*c).max(head.len());
        Ok(best)
    }

    /// Sum of per-segment best-of-K durations over the tunable segments.
    pub fn estimate(&mut self, scheme: &FusionScheme) -> Result<f64> {
        scheme.validate(self.graph)?;
        self.stats.evaluated_schemes.push(scheme.clone());
        let segs: Vec<Segment> = scheme.tunable_segments(self.graph).collect();
        let mut total = 0.0;
        for seg in segs {
            total += self.segment_estimate(scheme, seg)?;
        }
        Ok(total)
    }

    /// Stage 1. Returns the best scheme found and its estimate.
    pub fn expand_fusion(&mut self, init: &FusionScheme) -> Result<(FusionScheme, f64)> {
        let base = self.estimate(init)?;
        self.stats.accepted_estimates.push(base);
        let mut state = DfsState {
            best: (init.clone(), base),
            seen: BTreeSet::from([init.code().canonical()]),
        };
        self.dfs(init, base, &mut state);
        Ok(state.best)
    }

    /// Follows every transition that improves on `current`; anything else
    /// is rolled back. Each scheme is estimated at most once.
    fn dfs(&mut self, current: &FusionScheme, current_est: f64, state: &mut DfsState) {
        for t in transitions(current, self.graph) {
            let next = t.apply(current);
            if !state.seen.insert(next.code().canonical()) {
                continue;
            }
            self.stats.stage1_candidates += 1;
            match self.estimate(&next) {
                Ok(d) => {
                    if d < current_est * (1.0 - self.config.accept_threshold) {
                        log::debug!("accept {} ({:?}): {d:.6e}", next.code(), t);
                        self.stats.stage1_accepted += 1;
                        if d < state.best.1 {
                            state.best = (next.clone(), d);
                            self.stats.accepted_estimates.push(d);
                        }
                        self.dfs(&next, d, state);
                    }
                }
                Err(e) => {
                    log::warn!("skipping transition {t:?} to {}: {e}", next.code());
                    self.stats.stage1_skipped += 1;
                }
            }
        }
    }

    /// Stage 2 over the tunable segments of a fixed scheme.
    pub fn tune_params(&mut self, scheme: &FusionScheme) -> Result<ParamAssignment> {
        let segs: Vec<Segment> = scheme.tunable_segments(self.graph).collect();
        if segs.is_empty() {
            return Ok(ParamAssignment::default());
        }
        let budget = self.config.stage2_budget_per_iter;
        if budget < segs.len() {
            return Err(Error::InvalidParameter(format!(
                "stage-2 budget {budget} is below the segment count {}",
                segs.len()
            )));
        }
        for &seg in &segs {
            self.segment_estimate(scheme, seg)?;
        }

        let n = segs.len();
        let mut shares: Vec<usize> = (0..n)
            .map(|i| budget / n + usize::from(i < budget % n))
            .collect();
        let mut revisit = vec![0usize; n];
        let mut stagnant = 0;
        for iter in 0..self.config.stage2_iters {
            let remaining: Vec<usize> = segs
                .iter()
                .map(|s| self.orders[s].len() - self.cursor[s])
                .collect();
            let sampled: Vec<usize> = (0..n).filter(|&i| self.cursor[&segs[i]] > 0).collect();
            if remaining.iter().all(|&r| r == 0) && sampled.is_empty() {
                log::debug!("stage 2: no segment has a setting to evaluate");
                break;
            }
            let alloc = allocate(&shares, &remaining, budget);
            let before: Vec<f64> = segs.iter().map(|s| self.best[s].0).collect();
            let measured_before = self.stats.measurements;
            let mut issued = 0;
            for (i, &seg) in segs.iter().enumerate() {
                for _ in 0..alloc[i] {
                    let c = self.cursor[&seg];
                    let setting = self.orders[&seg][c];
                    self.cursor.insert(seg, c + 1);
                    issued += 1;
                    if let Err(e) = self.evaluate(scheme, seg, setting) {
                        log::warn!("stage 2: {seg} under {setting:?} failed: {e}");
                    }
                }
            }
            // fill the rest of the budget with cached revisits
            let mut i = 0;
            while issued < budget && !sampled.is_empty() {
                let k = sampled[i % sampled.len()];
                let seg = segs[k];
                let c = self.cursor[&seg];
                let setting = self.orders[&seg][revisit[k] % c];
                revisit[k] += 1;
                issued += 1;
                if let Err(e) = self.evaluate(scheme, seg, setting) {
                    log::warn!("stage 2: revisit of {seg} failed: {e}");
                }
                i += 1;
            }
            self.stats.stage2_evaluations.push(issued);
            self.stats
                .stage2_measurements
                .push(self.stats.measurements - measured_before);

            let gains: Vec<f64> = segs
                .iter()
                .zip(&before)
                .map(|(s, b)| b - self.best[s].0)
                .collect();
            let mut rewarded = None;
            for (i, &g) in gains.iter().enumerate() {
                if g > 0.0 && rewarded.is_none_or(|r: usize| g > gains[r]) {
                    rewarded = Some(i);
                }
            }
            match rewarded {
                Some(r) => {
                    stagnant = 0;
                    shares = reward(&shares, r, self.config.reward_boost, budget);
                }
                None => {
                    stagnant += 1;
                    if stagnant >= 2 {
                        break;
                    }
                }
            }
            if segs.iter().all(|s| self.cursor[s] == self.orders[s].len()) {
                log::debug!(
                    "stage 2: every grid exhausted after {} iterations",
                    iter + 1
                );
                break;
            }
        }

        let mut out = ParamAssignment::default();
        for &seg in &segs {
            out.insert(seg, self.best[&seg].1);
        }
        Ok(out)
    }

    /// Best measured duration of a segment so far.
    pub fn best_of(&self, seg: Segment) -> Option<(f64, ParamSetting)> {
        self.best.get(&seg).copied()
    }
}

struct DfsState {
    best: (FusionScheme, f64),
    seen: BTreeSet<SchemeCode>,
}

/// Caps shares at the remaining grid sizes and hands the excess to segments
/// with room left, leftmost first, one at a time.
fn allocate(shares: &[usize], remaining: &[usize], budget: usize) -> Vec<usize> {
    let mut alloc: Vec<usize> = shares
        .iter()
        .zip(remaining)
        .map(|(&s, &r)| s.min(r))
        .collect();
    let mut spare = budget - alloc.iter().sum::<usize>();
    while spare > 0 {
        let mut moved = false;
        for i in 0..alloc.len() {
            if spare > 0 && alloc[i] < remaining[i] {
                alloc[i] += 1;
                spare -= 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    alloc
}

/// Boosts `rewarded`'s share and renormalises to `budget` with floors; the
/// rounding remainder goes to `rewarded`.
fn reward(shares: &[usize], rewarded: usize, boost: f64, budget: usize) -> Vec<usize> {
    let raw: Vec<f64> = shares
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if i == rewarded {
                s as f64 * boost
            } else {
                s as f64
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        let mut out = vec![0; shares.len()];
        out[rewarded] = budget;
        return out;
    }
    let mut out: Vec<usize> = raw
        .iter()
        .map(|r| (r / total * budget as f64).floor() as usize)
        .collect();
    let assigned: usize = out.iter().sum();
    out[rewarded] += budget - assigned;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    /// Inclusive operator ids.
    pub segment: [usize; 2],
    pub ops: Vec<OpKind>,
    /// `None` for the frozen MHA segment.
    pub template: Option<TemplateKind>,
    pub setting: Option<ParamSetting>,
    pub seconds: Option<f64>,
    pub untuned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportStats {
    pub measurements: usize,
    pub cache_hits: usize,
    pub evaluations: usize,
    pub cache_hit_rate: f64,
    pub stage1_candidates: usize,
    pub stage1_accepted: usize,
    pub stage1_skipped: usize,
    pub stage2_iterations: usize,
    pub stage2_evaluations: Vec<usize>,
}

/// Deterministic for deterministic backends: wall-clock tuning time is
/// returned beside the report, not inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub schema_version: u32,
    pub graph: String,
    pub hyper: Hyper,
    pub hw: String,
    pub backend: String,
    pub seed: u64,
    pub plan: KernelPlan,
    pub initial_scheme: SchemeDoc,
    pub scheme: SchemeDoc,
    pub segments: Vec<SegmentReport>,
    /// Sum of per-segment best durations after stage 2, seconds.
    pub estimate_seconds: f64,
    /// Backend end-to-end duration of the final scheme and assignment.
    pub end_to_end_seconds: f64,
    pub untuned: bool,
    pub stats: ReportStats,
}

pub struct PipelineOutcome {
    pub report: TuningReport,
    pub scheme: FusionScheme,
    pub assignment: ParamAssignment,
    pub stats: SearchStats,
    pub elapsed: Duration,
}

/// Kernel plan for the MHA, then init, stage 1 and stage 2 on the chain.
pub fn run_pipeline(
    graph: &OpGraph,
    hw: &HardwareSpec,
    mask: &DenseMask,
    backend: &dyn MeasurementBackend,
    cache: &mut TuningCache,
    config: &SearchConfig,
) -> Result<PipelineOutcome> {
    let started = Instant::now();
    let h = graph.hyper;
    let plan = select_plan(mask, hw, h.seq_len, h.heads, h.bs, h.head_size())?;
    let init = init_scheme(graph, config);
    let mut tuner = Tuner::new(graph, backend, cache, config)?;
    let (scheme, _) = tuner.expand_fusion(&init)?;
    let assignment = tuner.tune_params(&scheme)?;
    let untuned_set = tuner.untuned.clone();

    let mut segments = Vec::new();
    let mut estimate = 0.0;
    for &seg in &scheme.segments {
        let ops: Vec<OpKind> = graph.nodes[seg.ops()].iter().map(|n| n.kind).collect();
        let frozen = ops.contains(&OpKind::MhaFused);
        let best = if frozen { None } else { tuner.best_of(seg) };
        if let Some((s, _)) = best {
            estimate += s;
        }
        segments.push(SegmentReport {
            segment: [seg.start, seg.end - 1],
            ops,
            template: if frozen {
                None
            } else {
                classify_segment(seg, graph).ok()
            },
            setting: assignment.get(seg).copied(),
            seconds: best.map(|b| b.0),
            untuned: untuned_set.contains(&seg),
        });
    }
    let stats = std::mem::take(&mut tuner.stats);
    drop(tuner);
    cache.flush()?;
    let end_to_end = backend.end_to_end(graph, &scheme, &assignment)?;

    let report = TuningReport {
        schema_version: REPORT_SCHEMA_VERSION,
        graph: graph.name.clone(),
        hyper: h,
        hw: hw.name.clone(),
        backend: backend.id(),
        seed: config.seed,
        plan,
        initial_scheme: SchemeDoc::new(&init, Some(graph)),
        scheme: SchemeDoc::new(&scheme, Some(graph)),
        segments,
        estimate_seconds: estimate,
        end_to_end_seconds: end_to_end,
        untuned: !untuned_set.is_empty(),
        stats: ReportStats {
            measurements: stats.measurements,
            cache_hits: stats.cache_hits,
            evaluations: stats.evaluations,
            cache_hit_rate: stats.cache_hit_rate(),
            stage1_candidates: stats.stage1_candidates,
            stage1_accepted: stats.stage1_accepted,
            stage1_skipped: stats.stage1_skipped,
            stage2_iterations: stats.stage2_evaluations.len(),
            stage2_evaluations: stats.stage2_evaluations.clone(),
        },
    };
    Ok(PipelineOutcome {
        report,
        scheme,
        assignment,
        stats,
        elapsed: started.elapsed(),
    })
}
