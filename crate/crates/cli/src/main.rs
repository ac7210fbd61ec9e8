//! `bcae`: generate synthetic wedges, train models, compress and decompress
//! wedge files, evaluate reconstructions and benchmark encoder throughput.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bcae_core::tensor::Precision;

#[derive(Parser)]
#[command(name = "bcae", version, about = "BCAE compressor for TPC wedge data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a file of synthetic zero-suppressed wedges.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Encode every wedge of a file into a code file.
    Compress(CompressArgs),
    /// Decode a code file back into log-ADC wedges.
    Decompress(DecompressArgs),
    /// Score reconstructions against the original wedges.
    Evaluate(EvaluateArgs),
    /// Measure encoder throughput on memory-resident synthetic wedges.
    Bench(BenchArgs),
    /// Train every (m, n) pair of BCAE-2D and report a metric matrix.
    Grid(GridArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Full,
    Half,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Full => Precision::Full32,
            PrecisionArg::Half => Precision::Half16,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WedgeSource {
    Synthetic,
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON generator config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    events: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Wedge extents as R,A,H.
    #[arg(long, value_parser = parse_extents)]
    extents: Option<[usize; 3]>,
}

#[derive(Args)]
struct ModelArgs {
    /// bcae2d (default), bcaepp or bcaeht.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// 2D trunk width (also the code channel count).
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training wedges (TPCW).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// JSON training config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Per-epoch log as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write a checkpoint after every epoch instead of only at the end.
    #[arg(long)]
    checkpoint_every_epoch: bool,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 4)]
    batch: usize,
}

#[derive(Args)]
struct DecompressArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Segmentation threshold; defaults to the model's.
    #[arg(long)]
    threshold: Option<f32>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Ground-truth wedges (TPCW).
    #[arg(long)]
    input: PathBuf,
    /// Report path; `.json` selects JSON, anything else CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    precision: PrecisionArg,
    #[arg(long)]
    threshold: Option<f32>,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained model; without it a seeded random model of `--variant` is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "bcae2d")]
    variant: String,
    #[arg(long, value_enum, default_value = "full")]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, value_enum, default_value = "synthetic")]
    wedge_source: WedgeSource,
    /// Wedge extents as R,A,H.
    #[arg(long, value_parser = parse_extents)]
    extents: Option<[usize; 3]>,
    /// Time decoding as well as encoding.
    #[arg(long)]
    full_pipeline: bool,
    /// Report path; `.json` selects JSON, anything else CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Training wedges (TPCW).
    #[arg(long)]
    data: PathBuf,
    /// Evaluation wedges; defaults to the held-out slice of `--data`.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    ms: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; `.json` selects JSON, anything else CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_extents(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(parts).map_err(|p| format!("expected three extents R,A,H, got {}", p.len()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Compress(a) => commands::compress(a),
        Command::Decompress(a) => commands::decompress(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Bench(a) => commands::bench(a),
        Command::Grid(a) => commands::grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
