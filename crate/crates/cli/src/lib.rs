//! `focal` command-line front end. Every subcommand prints a JSON
//! [`RunReport`] on stdout; table-producing subcommands can print CSV
//! instead (`--csv`) or write it to a file (`--out`).

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

mod commands;

pub use commands::GeometryConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "focal", version, about = "Focal attention geometry, cost accounting and verification")]
pub struct Cli {
    /// Seed for weights and sampled inputs.
    #[arg(long, global = true, env = "FOCAL_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
    #[command(subcommand)]
    pub command: Command,
}

/// Where the model comes from: a preset, a config file or a saved weight file.
#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct ModelSource {
    #[arg(long, value_parser = ["tiny", "small", "base"])]
    pub model: Option<String>,
    /// TOML, or JSON when the extension is `.json`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weight file written by `resize-bias` (or any saved model).
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TableOutput {
    /// Print the table as CSV instead of the JSON report.
    #[arg(long, conflicts_with = "out")]
    pub csv: bool,
    /// Write the table as CSV to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter total and per-module breakdown.
    Paramcount {
        #[command(flatten)]
        source: ModelSource,
    },
    /// Multiply-accumulate totals per stage.
    Flops {
        #[command(flatten)]
        source: ModelSource,
        /// `N` or `HxW`; defaults to the config's input size.
        #[arg(long, value_parser = parse_extent)]
        input: Option<[usize; 2]>,
    },
    /// Gather plan of a single attention layer as CSV.
    Geometry {
        #[arg(long)]
        config: PathBuf,
        /// Restrict to one window, `ROW,COL`.
        #[arg(long, value_parser = parse_pair)]
        window: Option<(usize, usize)>,
        #[command(flatten)]
        table: TableOutput,
    },
    /// Receptive area against token budget over a level schedule.
    ReceptiveField {
        /// `SW:SR,SW:SR,...` or `doubling:REGION:LEVELS[:CAP]`.
        #[arg(long)]
        levels: String,
        #[command(flatten)]
        table: TableOutput,
    },
    /// Forward pass on a seeded random image; reports a digest of the logits.
    Forward {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, value_parser = parse_extent)]
        input: Option<[usize; 2]>,
    },
    /// Fast path against the scalar oracle on randomized instances.
    Equivalence {
        #[arg(long, default_value_t = 100)]
        cases: u64,
    },
    /// Analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: u64,
    },
    /// Per-layer attention mass inside the window, around it and on pooled keys.
    AttnStats {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, value_parser = parse_extent)]
        input: Option<[usize; 2]>,
        #[command(flatten)]
        table: TableOutput,
    },
    /// One CSV per layer and level with every position-bias entry.
    BiasDump {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long)]
        out: PathBuf,
    },
    /// Change per-stage focal regions, resample the bias tables and save.
    ResizeBias {
        #[command(flatten)]
        source: ModelSource,
        /// One region per stage, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        level: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Paramcount { .. } => "paramcount",
            Command::Flops { .. } => "flops",
            Command::Geometry { .. } => "geometry",
            Command::ReceptiveField { .. } => "receptive-field",
            Command::Forward { .. } => "forward",
            Command::Equivalence { .. } => "equivalence",
            Command::Gradcheck { .. } => "gradcheck",
            Command::AttnStats { .. } => "attn-stats",
            Command::BiasDump { .. } => "bias-dump",
            Command::ResizeBias { .. } => "resize-bias",
        }
    }

    fn table(&self) -> Option<&TableOutput> {
        match self {
            Command::Geometry { table, .. } | Command::ReceptiveField { table, .. } | Command::AttnStats { table, .. } => {
                Some(table)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    /// SHA-256 of the canonical JSON of whatever configured the run.
    pub config_digest: String,
    pub seed: u64,
    pub wall_ms: u64,
    pub result: Value,
}

fn parse_extent(s: &str) -> std::result::Result<[usize; 2], String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok([parse(h)?, parse(w)?]),
        None => {
            let n = parse(s)?;
            Ok([n, n])
        }
    }
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected ROW,COL, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Parses `args` (program name first), runs the subcommand and writes its
/// output. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_USAGE
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads as usize).build()?;
    let start = Instant::now();
    let mut outcome = pool.install(|| commands::dispatch(cli))?;
    let wall_ms = start.elapsed().as_millis() as u64;

    if let (Some(table), Some(csv)) = (cli.command.table(), &outcome.table) {
        if table.csv {
            out.write_all(csv.as_bytes())?;
            return Ok(if outcome.passed { EXIT_OK } else { EXIT_VERIFY });
        }
        if let Some(path) = &table.out {
            std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
            outcome.result["csv"] = Value::String(path.display().to_string());
        }
    }
    let report = RunReport {
        command: cli.command.name().to_string(),
        config_digest: sha256_hex(&serde_json::to_vec(&outcome.config)?),
        seed: cli.seed,
        wall_ms,
        result: outcome.result,
    };
    serde_json::to_writer_pretty(&mut *out, &report)?;
    writeln!(out)?;
    Ok(if outcome.passed { EXIT_OK } else { EXIT_VERIFY })
}
