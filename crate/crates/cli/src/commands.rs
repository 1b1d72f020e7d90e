//! Subcommand implementations. Each builds one serialisable output value;
//! JSON is canonical and text is rendered from the same value.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sparsefuse::attention::{
    block_sparse_sdpa_traced, dense_sdpa_oracle, rowwise_sdpa, AttentionInput, AttentionShape,
};
use sparsefuse::backend::{CpuBackend, MeasurementBackend, SyntheticCostModel};
use sparsefuse::bsr::{build_bsr, build_rowwise, BlockStats};
use sparsefuse::fusion::{
    build_preset_graph, FusionScheme, Hyper, ModelPreset, OpGraph, SchemeCode, SchemeDoc,
};
use sparsefuse::kernel::{select_plan_with, HardwareSpec, KernelPlan};
use sparsefuse::mask::{DenseMask, MaskDescriptor};
use sparsefuse::search::{cache_file_key, run_pipeline, SearchConfig, TuningCache, TuningReport};

use crate::input::UsageError;
use crate::render;
use crate::{
    AttnCommand, BackendKind, Cli, Command, FuseCommand, GraphArgs, MaskCommand, OutputFormat,
    PlanCommand, ReportCommand, SelectArgs, TuneArgs, TuneCommand, VerifyArgs,
};

/// A verification that ran to completion and did not hold.
#[derive(Debug)]
pub struct VerifyFailure(pub String);

impl std::fmt::Display for VerifyFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerifyFailure {}

pub struct Classified {
    pub kind: &'static str,
    pub code: u8,
}

/// Exit 2 for bad input, 1 for failures while running or verifying.
pub fn classify(err: &anyhow::Error) -> Classified {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return Classified {
                kind: "usage",
                code: 2,
            };
        }
        if cause.is::<VerifyFailure>() {
            return Classified {
                kind: "verification-failed",
                code: 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<sparsefuse::Error>() {
            use sparsefuse::Error as E;
            let code = match e {
                E::Backend(_) | E::Inconsistent(_) | E::Plan(_) => 1,
                _ => 2,
            };
            return Classified {
                kind: e.kind(),
                code,
            };
        }
        if cause.is::<serde_json::Error>() {
            return Classified {
                kind: "json-error",
                code: 2,
            };
        }
        if cause.is::<std::io::Error>() {
            return Classified {
                kind: "io-error",
                code: 2,
            };
        }
    }
    Classified {
        kind: "failure",
        code: 1,
    }
}

/// Prints to stdout; a closed pipe downstream is not an error.
fn emit<T: Serialize>(
    format: OutputFormat,
    value: &T,
    text: impl FnOnce(&T) -> String,
) -> Result<()> {
    let body = match format {
        OutputFormat::Json => serde_json::to_string_pretty(value)?,
        OutputFormat::Text => text(value),
    };
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{body}").and_then(|()| stdout.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let out = cli.output.unwrap_or(OutputFormat::Json);
    match &cli.command {
        Command::Mask(MaskCommand::Gen { mask, dense_out }) => {
            let input = mask.resolve(cli.seed)?;
            let Some(descriptor) = input.descriptor else {
                bail!(UsageError(
                    "mask gen needs a pattern or descriptor, not a dense dump".into()
                ));
            };
            if let Some(path) = dense_out {
                let file = fs::File::create(path)
                    .with_context(|| format!("creating {}", path.display()))?;
                input.mask.write_dense(std::io::BufWriter::new(file))?;
            }
            emit(out, &descriptor, |d| render::descriptor(d, &input.mask))
        }
        Command::Mask(MaskCommand::Stats {
            mask,
            block,
            block_n,
        }) => {
            let input = mask.resolve(cli.seed)?;
            let stats = mask_stats(
                input.descriptor,
                &input.mask,
                *block,
                block_n.unwrap_or(*block),
            )?;
            emit(out, &stats, render::mask_stats)
        }
        Command::Attn(AttnCommand::Verify(args)) => verify(cli.seed, out, args),
        Command::Plan(PlanCommand::Select(args)) => {
            let report = plan_select(cli.seed, args)?;
            emit(out, &report, render::plan)
        }
        Command::Fuse(FuseCommand::Encode { lengths, graph }) => {
            let scheme = FusionScheme::from_lengths(lengths)?;
            emit(out, &fuse_output(&scheme, graph)?, render::scheme)
        }
        Command::Fuse(FuseCommand::Decode { code, len, graph }) => {
            let code = match len {
                Some(n) => SchemeCode::from_hex(code, *n)?,
                None => code.parse()?,
            };
            emit(
                out,
                &fuse_output(&FusionScheme::from_code(&code), graph)?,
                render::scheme,
            )
        }
        Command::Tune(TuneCommand::Run(args)) => {
            let result = tune(cli, args)?;
            emit(out, &result, render::tune)
        }
        Command::Report(ReportCommand::Show { path }) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let report: TuningReport =
                serde_json::from_str(&text).context("not a tuning report")?;
            emit(
                cli.output.unwrap_or(OutputFormat::Text),
                &report,
                render::report,
            )
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskStats {
    pub descriptor: Option<MaskDescriptor>,
    pub seq_len: usize,
    pub sparsity: f64,
    pub block_stats: BlockStats,
}

fn mask_stats(
    descriptor: Option<MaskDescriptor>,
    mask: &DenseMask,
    bm: usize,
    bn: usize,
) -> Result<MaskStats> {
    let bsr = build_bsr(mask, bm, bn)?;
    Ok(MaskStats {
        descriptor,
        seq_len: mask.seq_len(),
        sparsity: mask.sparsity(),
        block_stats: bsr.block_stats(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub descriptor: Option<MaskDescriptor>,
    pub shape: [usize; 4],
    pub block_m: usize,
    pub block_n: usize,
    pub fault_injected: bool,
    pub blockwise_max_abs_error: f64,
    pub rowwise_max_abs_error: f64,
    pub tolerance: f64,
    pub rowwise_tolerance: f64,
    pub valid_tiles: usize,
    pub loaded_tiles: usize,
    pub tile_visits: usize,
    pub masked_rows: usize,
    pub masked_rows_zero: bool,
    pub pass: bool,
}

/// Clears the first valid tile, or fills the first tile of an empty mask.
fn flip_one_tile(mask: &DenseMask, bm: usize, bn: usize) -> DenseMask {
    let s = mask.seq_len();
    let mut out = mask.clone();
    for bi in 0..s.div_ceil(bm) {
        for bj in 0..s.div_ceil(bn) {
            let cells = || {
                (bi * bm..(bi * bm + bm).min(s))
                    .flat_map(move |i| (bj * bn..(bj * bn + bn).min(s)).map(move |j| (i, j)))
            };
            if cells().any(|(i, j)| mask.get(i, j)) {
                cells().for_each(|(i, j)| out.set(i, j, false));
                return out;
            }
        }
    }
    for i in 0..bm.min(s) {
        for j in 0..bn.min(s) {
            out.set(i, j, true);
        }
    }
    out
}

fn verify(seed: u64, out: OutputFormat, args: &VerifyArgs) -> Result<()> {
    let input = args.mask.resolve(seed)?;
    let mask = &input.mask;
    let shape = AttentionShape {
        bs: args.bs,
        heads: args.heads,
        seq_len: mask.seq_len(),
        head_size: args.head_size,
    };
    let tensors = AttentionInput::<f64>::random(shape, seed);
    let oracle = dense_sdpa_oracle(&tensors, mask)?;
    let kernel_mask = if args.inject_fault {
        flip_one_tile(mask, args.block_m, args.block_n)
    } else {
        mask.clone()
    };
    let bsr = build_bsr(&kernel_mask, args.block_m, args.block_n)?;
    let (blockwise, trace) = block_sparse_sdpa_traced(&tensors.cast::<f32>(), &bsr)?;
    let rowwise = rowwise_sdpa(&tensors, &build_rowwise(mask))?;

    let masked: Vec<usize> = (0..mask.seq_len())
        .filter(|&i| !mask.row(i).contains(&true))
        .collect();
    let masked_rows_zero = (0..shape.bs).all(|b| {
        (0..shape.heads).all(|h| {
            masked
                .iter()
                .all(|&i| blockwise.row(b, h, i).iter().all(|v| *v == 0.0))
        })
    });
    let report = VerifyReport {
        descriptor: input.descriptor,
        shape: [shape.bs, shape.heads, shape.seq_len, shape.head_size],
        block_m: args.block_m,
        block_n: args.block_n,
        fault_injected: args.inject_fault,
        blockwise_max_abs_error: blockwise.max_abs_diff(&oracle),
        rowwise_max_abs_error: rowwise.max_abs_diff(&oracle),
        tolerance: args.tol,
        rowwise_tolerance: args.rowwise_tol,
        valid_tiles: build_bsr(mask, args.block_m, args.block_n)?.valid_count(),
        loaded_tiles: trace.tiles.len(),
        tile_visits: trace.visits,
        masked_rows: masked.len(),
        masked_rows_zero,
        pass: false,
    };
    let pass = report.blockwise_max_abs_error <= report.tolerance
        && report.rowwise_max_abs_error <= report.rowwise_tolerance
        && report.loaded_tiles == report.valid_tiles
        && report.masked_rows_zero;
    let report = VerifyReport { pass, ..report };
    emit(out, &report, render::verify)?;
    if !report.pass {
        bail!(VerifyFailure(format!(
            "attention verification failed: block-wise error {:.3e} (tol {:.1e}), row-wise error {:.3e} (tol {:.1e}), tiles loaded {} of {} valid",
            report.blockwise_max_abs_error,
            report.tolerance,
            report.rowwise_max_abs_error,
            report.rowwise_tolerance,
            report.loaded_tiles,
            report.valid_tiles
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlanReport {
    pub descriptor: Option<MaskDescriptor>,
    pub hw: HardwareSpec,
    pub seq_len: usize,
    pub heads: usize,
    pub bs: usize,
    pub head_size: usize,
    pub tau: f64,
    pub plan: KernelPlan,
}

fn plan_select(seed: u64, args: &SelectArgs) -> Result<PlanReport> {
    let hw = HardwareSpec::resolve(&args.hw)?;
    let input = args.mask.resolve(seed)?;
    let seq_len = input.mask.seq_len();
    let plan = select_plan_with(
        &input.mask,
        &hw,
        seq_len,
        args.heads,
        args.bs,
        args.head_size,
        args.tau,
        args.verbose,
    )?;
    Ok(PlanReport {
        descriptor: input.descriptor,
        hw,
        seq_len,
        heads: args.heads,
        bs: args.bs,
        head_size: args.head_size,
        tau: args.tau,
        plan,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FuseOutput {
    #[serde(flatten)]
    pub doc: SchemeDoc,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelPreset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub legal: Option<bool>,
}

fn build_graph(args: &GraphArgs) -> Result<Option<OpGraph>> {
    let Some(name) = &args.model else {
        return Ok(None);
    };
    let preset: ModelPreset = name.parse()?;
    let hyper = Hyper {
        bs: args.bs,
        seq_len: args.seq_len,
        hidden_dim: args.hidden,
        heads: args.heads,
    };
    let graph = build_preset_graph(preset, hyper);
    graph.validate()?;
    Ok(Some(graph))
}

fn fuse_output(scheme: &FusionScheme, args: &GraphArgs) -> Result<FuseOutput> {
    let graph = build_graph(args)?;
    if let Some(g) = &graph {
        if g.len() != scheme.n_ops() {
            bail!(UsageError(format!(
                "scheme covers {} operators but the {} graph has {}",
                scheme.n_ops(),
                g.name,
                g.len()
            )));
        }
    }
    Ok(FuseOutput {
        doc: SchemeDoc::new(scheme, graph.as_ref().filter(|g| scheme.is_legal(g))),
        model: args.model.as_ref().map(|m| m.parse()).transpose()?,
        legal: graph.as_ref().map(|g| scheme.is_legal(g)),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TuneOutput {
    pub report_path: PathBuf,
    pub cache_path: PathBuf,
    pub elapsed_seconds: f64,
    pub report: TuningReport,
}

fn tune(cli: &Cli, args: &TuneArgs) -> Result<TuneOutput> {
    let mut graph_args = args.graph.clone();
    graph_args.model.get_or_insert_with(|| "bert-layer".into());
    let graph = build_graph(&graph_args)?.expect("model set above");
    let hw = HardwareSpec::resolve(&args.hw)?;

    let mask_args = crate::input::MaskArgs {
        pattern: Some(args.pattern.clone().unwrap_or_else(|| "sliding".into())),
        seq_len: Some(graph.hyper.seq_len),
        band: Some(args.band.min(graph.hyper.seq_len)),
        ..Default::default()
    };
    let mask = mask_args.resolve(cli.seed)?.mask;

    let mut config: SearchConfig = match &args.config {
        Some(path) => serde_json::from_str(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )
        .context("invalid search config")?,
        None => SearchConfig::default(),
    };
    config.seed = cli.seed;
    if let Some(k) = args.samples_per_eval {
        config.samples_per_eval = k;
    }
    if let Some(b) = args.budget {
        config.stage2_budget_per_iter = b;
    }
    if let Some(r) = args.iters {
        config.stage2_iters = r;
    }
    config.validate()?;

    let backend: Box<dyn MeasurementBackend> = match cli.backend {
        BackendKind::Synthetic => Box::new(match &args.synthetic_model {
            Some(path) => SyntheticCostModel::from_json(
                &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
            )?,
            None => SyntheticCostModel::default(),
        }),
        BackendKind::Cpu => {
            let b = CpuBackend::new(cli.seed);
            let (w, r) = (
                args.warmups.unwrap_or(b.warmups),
                args.repeats.unwrap_or(b.repeats),
            );
            Box::new(b.with_protocol(w, r))
        }
    };

    let key = cache_file_key(&graph, &backend.id(), &hw);
    fs::create_dir_all(&args.cache_dir)
        .with_context(|| format!("creating {}", args.cache_dir.display()))?;
    let cache_path = args.cache_dir.join(format!("{key}.jsonl"));
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.cache_dir.join(format!("report-{key}.json")));
    let mut cache = TuningCache::open(&cache_path)?;
    let outcome = run_pipeline(&graph, &hw, &mask, backend.as_ref(), &mut cache, &config)?;
    let mut text = serde_json::to_string_pretty(&outcome.report)?;
    text.push('\n');
    fs::write(&report_path, text).with_context(|| format!("writing {}", report_path.display()))?;
    Ok(TuneOutput {
        report_path,
        cache_path,
        elapsed_seconds: outcome.elapsed.as_secs_f64(),
        report: outcome.report,
    })
}

/// Error object details for JSON consumers.
pub fn details(err: &anyhow::Error) -> Value {
    json!(err
        .chain()
        .skip(1)
        .map(|c| c.to_string())
        .collect::<Vec<_>>())
}
