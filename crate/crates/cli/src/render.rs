//! Text renderings of command outputs.

use std::fmt::Write;

use sparsefuse::kernel::{KernelKind, KernelPlan};
use sparsefuse::mask::{DenseMask, MaskDescriptor};
use sparsefuse::search::TuningReport;

use crate::commands::{FuseOutput, MaskStats, PlanReport, TuneOutput, VerifyReport};

pub fn descriptor(d: &MaskDescriptor, mask: &DenseMask) -> String {
    let p = &d.params;
    format!(
        "pattern {:?}, seq_len {}, band {}, global {}, dilation {}, filling rate {}, random block {}, seed {}\nsparsity {:.4}",
        d.pattern,
        d.seq_len,
        p.band_width,
        p.global_width,
        p.dilation_rate,
        p.filling_rate,
        p.block,
        p.seed,
        mask.sparsity()
    )
}

pub fn mask_stats(s: &MaskStats) -> String {
    let b = &s.block_stats;
    format!(
        "seq_len {}  sparsity {:.4}\nblocks {}x{} on a {}x{} grid: {} full, {} part, {} empty (pool {}, valid ratio {:.4})",
        s.seq_len,
        s.sparsity,
        b.block_m,
        b.block_n,
        b.n_rows,
        b.n_cols,
        b.full_count,
        b.part_count,
        b.empty_count,
        b.pool_size,
        b.valid_block_ratio
    )
}

pub fn verify(r: &VerifyReport) -> String {
    format!(
        "{}: block-wise {:.3e} (tol {:.1e}), row-wise {:.3e} (tol {:.1e}); tiles loaded {} of {} valid; {}",
        if r.pass { "PASS" } else { "FAIL" },
        r.blockwise_max_abs_error,
        r.tolerance,
        r.rowwise_max_abs_error,
        r.rowwise_tolerance,
        r.loaded_tiles,
        r.valid_tiles,
        match (r.masked_rows, r.masked_rows_zero) {
            (0, _) => "no fully masked rows".to_string(),
            (n, true) => format!("{n} fully masked rows are zero"),
            (n, false) => format!("{n} fully masked rows are NOT zero"),
        }
    )
}

fn plan_line(p: &KernelPlan) -> String {
    let t = p
        .threshold
        .map_or("undefined".to_string(), |t| format!("{t:.5}"));
    match p.kind {
        KernelKind::RowWise => format!(
            "row-wise (threshold {t}{})",
            if p.fallback { ", fallback" } else { "" }
        ),
        KernelKind::BlockWise => format!(
            "block-wise BLOCK_M {} BLOCK_N {} num_warps {} score {:.4} (threshold {t})",
            p.block_m, p.block_n, p.num_warps, p.score
        ),
    }
}

pub fn plan(r: &PlanReport) -> String {
    let mut s = format!(
        "{} seq_len {} heads {} bs {} head_size {}: {}",
        r.hw.name,
        r.seq_len,
        r.heads,
        r.bs,
        r.head_size,
        plan_line(&r.plan)
    );
    for c in &r.plan.candidates {
        let _ = write!(
            s,
            "\n  {:>3}x{:<3} warps {:>2}  smem {:>7}  occ {:>6.3}  score {:.4}",
            c.block_m, c.block_n, c.num_warps, c.req_smem, c.occupancy, c.score
        );
    }
    s
}

pub fn scheme(f: &FuseOutput) -> String {
    let segs: Vec<String> = f
        .doc
        .segments
        .iter()
        .map(|[a, b]| {
            if a == b {
                format!("[{a}]")
            } else {
                format!("[{a}..{b}]")
            }
        })
        .collect();
    let mut s = format!(
        "code {} (hex {}, {} ops)\nsegments {}",
        f.doc.code,
        f.doc.hex,
        f.doc.length,
        segs.join(" ")
    );
    if let Some(legal) = f.legal {
        let _ = write!(
            s,
            "\nlegal for {:?}: {legal}",
            f.model.expect("model accompanies legality")
        );
    }
    if let Some(t) = &f.doc.templates {
        let names: Vec<String> = t
            .iter()
            .map(|k| k.map_or("MHA".into(), |k| format!("{k:?}")))
            .collect();
        let _ = write!(s, "\ntemplates {}", names.join(" "));
    }
    s
}

pub fn tune(t: &TuneOutput) -> String {
    format!(
        "{}\ntuning took {:.3} s; report {}; cache {}",
        report(&t.report),
        t.elapsed_seconds,
        t.report_path.display(),
        t.cache_path.display()
    )
}

pub fn report(r: &TuningReport) -> String {
    let h = &r.hyper;
    let mut s = format!(
        "{} (bs {}, seq_len {}, hidden {}, heads {}) on {} via {}, seed {}\nMHA kernel: {}\nscheme {} (hex {}), initial {}\n",
        r.graph,
        h.bs,
        h.seq_len,
        h.hidden_dim,
        h.heads,
        r.hw,
        r.backend,
        r.seed,
        plan_line(&r.plan),
        r.scheme.code,
        r.scheme.hex,
        r.initial_scheme.code
    );
    for seg in &r.segments {
        let ops: Vec<String> = seg.ops.iter().map(|o| format!("{o:?}")).collect();
        let setting = seg.setting.map_or("-".into(), |st| {
            serde_json::to_string(&st).unwrap_or_default()
        });
        let secs = seg
            .seconds
            .map_or("frozen".into(), |v| format!("{v:.4e} s"));
        let _ = writeln!(
            s,
            "  [{:>2}..{:>2}] {:<8} {:<40} {:<12} {}{}",
            seg.segment[0],
            seg.segment[1],
            seg.template.map_or("MHA".into(), |t| format!("{t:?}")),
            ops.join(" "),
            secs,
            setting,
            if seg.untuned { "  (untuned)" } else { "" }
        );
    }
    let st = &r.stats;
    let _ = write!(
        s,
        "estimate {:.4e} s, end-to-end {:.4e} s{}\nmeasurements {}, cache hits {} of {} ({:.1}%), stage 1 {} candidates / {} accepted / {} skipped, stage 2 {} iterations",
        r.estimate_seconds,
        r.end_to_end_seconds,
        if r.untuned { " (untuned segments present)" } else { "" },
        st.measurements,
        st.cache_hits,
        st.evaluations,
        st.cache_hit_rate * 100.0,
        st.stage1_candidates,
        st.stage1_accepted,
        st.stage1_skipped,
        st.stage2_iterations
    );
    s
}
