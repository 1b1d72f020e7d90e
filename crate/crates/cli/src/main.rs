//! `sparsefuse` command line: masks, attention verification, kernel plans,
//! fusion scheme codes and the tuning pipeline, with JSON on stdout.
//!
//! Exit codes: 0 success, 1 verification or measurement failure, 2 usage or
//! invalid input. Failures print `{"error": {...}}` on stderr.

mod commands;
mod input;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use input::MaskArgs;

#[derive(Parser, Debug)]
#[command(
    name = "sparsefuse",
    version,
    about = "Sparse attention planning and operator fusion tuning"
)]
pub struct Cli {
    /// Seed for random patterns, tensors and search sampling.
    #[arg(long, global = true, env = "SPARSEFUSE_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Output format; `report show` defaults to text, everything else to JSON.
    #[arg(long, global = true, value_enum)]
    pub output: Option<OutputFormat>,

    /// Measurement backend for `tune run`.
    #[arg(long, global = true, value_enum, default_value_t = BackendKind::Synthetic)]
    pub backend: BackendKind,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Cpu,
    Synthetic,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate masks and inspect their block structure.
    #[command(subcommand)]
    Mask(MaskCommand),
    /// Attention executors against the dense oracle.
    #[command(subcommand)]
    Attn(AttnCommand),
    /// Analytical kernel selection.
    #[command(subcommand)]
    Plan(PlanCommand),
    /// Fusion scheme codes.
    #[command(subcommand)]
    Fuse(FuseCommand),
    /// Two-stage fusion and parameter tuning.
    #[command(subcommand)]
    Tune(TuneCommand),
    /// Tuning reports.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Subcommand, Debug)]
pub enum MaskCommand {
    /// Print a mask descriptor; optionally write the dense bit dump.
    Gen {
        #[command(flatten)]
        mask: MaskArgs,
        /// Also write the packed dense mask to this file.
        #[arg(long)]
        dense_out: Option<PathBuf>,
    },
    /// Sparsity and block statistics; the input descriptor is passed through.
    Stats {
        #[command(flatten)]
        mask: MaskArgs,
        /// Block height (and width unless `--block-n` is given).
        #[arg(long, default_value_t = 16)]
        block: usize,
        #[arg(long)]
        block_n: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
pub enum AttnCommand {
    /// Oracle vs block-wise vs row-wise on seeded random tensors.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub mask: MaskArgs,
    #[arg(long, default_value_t = 1)]
    pub bs: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub head_size: usize,
    #[arg(long, default_value_t = 64)]
    pub block_m: usize,
    #[arg(long, default_value_t = 64)]
    pub block_n: usize,
    /// Maximum absolute error allowed for the 32-bit block-wise kernel.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Maximum absolute error allowed for the 64-bit row-wise kernel.
    #[arg(long, default_value_t = 1e-6)]
    pub rowwise_tol: f64,
    /// Flip one tile of the mask handed to the block-wise kernel.
    #[arg(long)]
    pub inject_fault: bool,
}

#[derive(Subcommand, Debug)]
pub enum PlanCommand {
    /// Choose row-wise or block-wise attention and its block setting.
    Select(SelectArgs),
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[command(flatten)]
    pub mask: MaskArgs,
    /// Hardware preset (a100, rtx4090) or path to a JSON hardware spec.
    #[arg(long, default_value = "a100")]
    pub hw: String,
    #[arg(long, default_value_t = 12)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub bs: usize,
    #[arg(long, default_value_t = 64)]
    pub head_size: usize,
    #[arg(long, default_value_t = sparsefuse::kernel::DEFAULT_TAU)]
    pub tau: f64,
    /// Include every scored candidate.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum FuseCommand {
    /// Scheme code from segment lengths, e.g. `1,2,1`.
    Encode {
        #[arg(value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        #[command(flatten)]
        graph: GraphArgs,
    },
    /// Segments from a binary code, or a hex code with `--len`.
    Decode {
        code: String,
        /// Treat CODE as hexadecimal with this many operators.
        #[arg(long)]
        len: Option<usize>,
        #[command(flatten)]
        graph: GraphArgs,
    },
}

#[derive(Args, Debug, Clone)]
pub struct GraphArgs {
    /// Model preset (bert-layer, gpt-layer, t5-layer); adds templates and legality.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub bs: usize,
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
}

#[derive(Subcommand, Debug)]
pub enum TuneCommand {
    /// Kernel plan, initial scheme, fusion search and parameter tuning.
    Run(TuneArgs),
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long, default_value = "a100")]
    pub hw: String,
    /// Attention mask pattern for the kernel plan (sliding window by default).
    #[arg(long)]
    pub pattern: Option<String>,
    #[arg(long, default_value_t = 32)]
    pub band: usize,
    /// Search configuration JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub samples_per_eval: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Synthetic cost model JSON.
    #[arg(long)]
    pub synthetic_model: Option<PathBuf>,
    /// Directory for the persistent measurement cache.
    #[arg(long, default_value = ".sparsefuse-cache")]
    pub cache_dir: PathBuf,
    /// Report path; defaults to `<cache-dir>/report-<key>.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Timed repeats per CPU measurement (after the warmups).
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub warmups: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum ReportCommand {
    /// Summarise a tuning report.
    Show { path: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let message = e.render().to_string();
            eprintln!(
                "{}",
                json!({ "error": { "kind": "usage", "exit_code": 2, "message": message.trim() } })
            );
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let f = commands::classify(&err);
            eprintln!(
                "{}",
                json!({ "error": { "kind": f.kind, "exit_code": f.code, "message": err.to_string(), "causes": commands::details(&err) } })
            );
            ExitCode::from(f.code)
        }
    }
}
