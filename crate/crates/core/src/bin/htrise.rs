use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use htrise::bht::Budget;
use htrise::metrics::NormMethod;
use htrise::stream::{
    compress, decode_indices, decode_latent_file, inspect_state, RunConfig, CSV_HEADER,
};

/// Streaming batch hierarchical Tucker compression.
#[derive(Parser)]
#[command(name = "htrise", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress batch files in order, creating or resuming a state file.
    Compress(CompressArgs),
    /// Reconstruct stored tensors into a batch file.
    Decode(DecodeArgs),
    /// Print the tree, ranks and ratios of a state file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct CompressArgs {
    /// Batch files or directories (files taken in lexicographic order).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Relative error target, in (0, 1).
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value = "none", value_parser = parse_norm)]
    normalize: NormMethod,
    /// Tensor mode whose slices are normalized separately (zero-based).
    #[arg(long)]
    field_axis: Option<usize>,
    /// Comma-separated extents replacing the tensor modes.
    #[arg(long, value_delimiter = ',')]
    reshape: Option<Vec<usize>>,
    /// Comma-separated axis order applied to each file; the batch axis must end up last.
    #[arg(long, value_delimiter = ',')]
    permute: Option<Vec<usize>>,
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    stats: PathBuf,
    /// Directory of held-out batch files for the test error column.
    #[arg(long)]
    test_dir: Option<PathBuf>,
    /// Compute the test error every K batches (0 disables).
    #[arg(long, default_value_t = 10)]
    rte_every: usize,
    /// Compute the test error after every batch.
    #[arg(long)]
    rte_every_update: bool,
    /// Redistribute unspent error budget after each layer.
    #[arg(long)]
    adaptive_budget: bool,
    /// Leave the timing column blank (byte-reproducible CSV).
    #[arg(long)]
    omit_timing: bool,
    /// Stop after this many new batches.
    #[arg(long)]
    max_batches: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    state: PathBuf,
    /// One-based tensor indices, comma-separated.
    #[arg(long, value_delimiter = ',', num_args = 0.., conflicts_with = "latent")]
    indices: Vec<usize>,
    /// Decode a latent batch file instead of stored slices.
    #[arg(long)]
    latent: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    state: PathBuf,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn parse_norm(s: &str) -> Result<NormMethod, String> {
    s.parse().map_err(|e: htrise::error::HtError| e.to_string())
}

fn run(cli: Cli) -> htrise::error::Result<()> {
    match cli.command {
        Command::Compress(a) => {
            let mut config = RunConfig::new(a.inputs, a.state, a.stats, a.epsilon);
            config.normalize = a.normalize;
            config.field_axis = a.field_axis;
            config.reshape = a.reshape;
            config.permute = a.permute;
            config.test_dir = a.test_dir;
            config.rte_every = if a.rte_every_update { 1 } else { a.rte_every };
            config.budget = if a.adaptive_budget {
                Budget::Adaptive
            } else {
                Budget::Uniform
            };
            config.omit_timing = a.omit_timing;
            config.max_batches = a.max_batches;
            let rows = compress(&config)?;
            eprintln!("{CSV_HEADER}");
            for row in &rows {
                eprintln!("{}", row.csv_row());
            }
        }
        Command::Decode(a) => {
            let n = match &a.latent {
                Some(latent) => decode_latent_file(&a.state, latent, &a.out)?,
                None => decode_indices(&a.state, &a.indices, &a.out)?,
            };
            if n == 0 {
                eprintln!("nothing to decode");
            } else {
                eprintln!("wrote {n} tensors to {}", a.out.display());
            }
        }
        Command::Inspect(a) => {
            let report = inspect_state(&a.state)?;
            if a.json {
                let text = serde_json::to_string_pretty(&report)
                    .map_err(|e| htrise::error::HtError::Format(e.to_string()))?;
                println!("{text}");
            } else {
                print!("{}", report.to_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
