//! Mask inputs shared by several subcommands: pattern flags, a descriptor
//! file, a packed dense dump, or JSON on stdin. Piped JSON may be a bare
//! descriptor or any command output that carries a `descriptor` field.

use std::io::{IsTerminal, Read};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use sparsefuse::mask::{DenseMask, MaskDescriptor, PatternKind, PatternParams};

#[derive(Args, Debug, Clone, Default)]
pub struct MaskArgs {
    /// sliding, dilated, global, random, longformer, bigbird, full, empty.
    #[arg(long)]
    pub pattern: Option<String>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Band width of sliding, dilated and compound patterns.
    #[arg(long)]
    pub band: Option<usize>,
    /// Number of global tokens.
    #[arg(long)]
    pub global: Option<usize>,
    #[arg(long)]
    pub dilation: Option<usize>,
    /// Fraction of random blocks filled.
    #[arg(long)]
    pub filling_rate: Option<f64>,
    /// Edge of a random block in tokens.
    #[arg(long)]
    pub random_block: Option<usize>,
    /// Descriptor JSON file, `-` for stdin.
    #[arg(long, conflicts_with_all = ["pattern", "dense"])]
    pub descriptor: Option<PathBuf>,
    /// Packed dense mask file written by `mask gen --dense-out`.
    #[arg(long, conflicts_with = "pattern")]
    pub dense: Option<PathBuf>,
}

/// A mask together with the descriptor it came from, when there is one.
pub struct MaskInput {
    pub descriptor: Option<MaskDescriptor>,
    pub mask: DenseMask,
}

impl MaskArgs {
    pub fn descriptor_from_flags(&self, pattern: &str, seed: u64) -> Result<MaskDescriptor> {
        let kind: PatternKind = pattern.parse()?;
        let seq_len = self
            .seq_len
            .ok_or_else(|| UsageError("--seq-len is required with --pattern".into()))?;
        let d = PatternParams::default();
        let params = PatternParams {
            band_width: self.band.unwrap_or(d.band_width.min(seq_len)),
            global_width: self.global.unwrap_or(d.global_width.min(seq_len)),
            dilation_rate: self.dilation.unwrap_or(d.dilation_rate),
            filling_rate: self.filling_rate.unwrap_or(d.filling_rate),
            block: self.random_block.unwrap_or(d.block),
            seed,
        };
        Ok(MaskDescriptor::new(kind, seq_len, params))
    }

    pub fn resolve(&self, seed: u64) -> Result<MaskInput> {
        if let Some(path) = &self.dense {
            let file =
                std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let mask = DenseMask::read_dense(std::io::BufReader::new(file))?;
            return Ok(MaskInput {
                descriptor: None,
                mask,
            });
        }
        let descriptor = match (&self.pattern, &self.descriptor) {
            (Some(p), _) => self.descriptor_from_flags(p, seed)?,
            (None, Some(path)) if path.as_os_str() != "-" => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                parse_descriptor(&text)?
            }
            _ => {
                let stdin = std::io::stdin();
                if stdin.is_terminal() {
                    bail!(UsageError(
                        "no mask given: pass --pattern, --descriptor, --dense or pipe a descriptor"
                            .into()
                    ));
                }
                let mut text = String::new();
                stdin.lock().read_to_string(&mut text)?;
                parse_descriptor(&text)?
            }
        };
        let mask = descriptor.build()?;
        Ok(MaskInput {
            descriptor: Some(descriptor),
            mask,
        })
    }
}

fn parse_descriptor(text: &str) -> Result<MaskDescriptor> {
    let value: serde_json::Value = serde_json::from_str(text).context("mask input is not JSON")?;
    let inner = match value.get("descriptor") {
        Some(d) if !d.is_null() => d.clone(),
        Some(_) => bail!(UsageError(
            "piped input carries no descriptor (was it built from a dense dump?)".into()
        )),
        None => value,
    };
    serde_json::from_value(inner).context("mask input is not a descriptor")
}

/// Bad or missing command-line input detected outside clap.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
