mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dxgen::corpus::{Modality, SplitRatio};
use dxgen::ErrorKind;

#[derive(Parser)]
#[command(name = "dxgen", version, about = "Report-to-diagnosis pipeline on a miniature decoder")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean, deduplicate and split a corpus; build the vocabulary and a base model.
    Prepare(PrepareArgs),
    /// Fine-tune a low-rank adapter on a prepared training split.
    Train(TrainArgs),
    /// Generate a diagnosis for one report.
    Infer(InferArgs),
    /// Score models and adapters on a prepared test split.
    Evaluate(EvaluateArgs),
    /// Time a fine-tune workload and per-report inference.
    Bench(BenchArgs),
}

#[derive(Args)]
#[group(id = "source", required = true, multiple = false)]
pub struct SourceArgs {
    /// JSON-lines corpus to ingest.
    #[arg(long, group = "source")]
    pub input: Option<PathBuf>,
    /// Generate this many synthetic records per modality instead.
    #[arg(long, group = "source")]
    pub synthesize: Option<usize>,
}

#[derive(Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train share: `0.6`, `3/5` or `6:4`.
    #[arg(long, default_value = "0.6")]
    pub ratio: SplitRatio,
    #[arg(long, default_value_t = 4096)]
    pub max_vocab: usize,
    /// Prompt template file; its last line is the response prefix.
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training settings given on the command line; each overrides the config file.
#[derive(Args, Default)]
pub struct TrainOverrides {
    /// `key = value` file with TrainConfig field names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting values before the file and flags: `desk` or `table`.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub grad_accum_steps: Option<usize>,
    #[arg(long)]
    pub lora_r: Option<usize>,
    #[arg(long)]
    pub lora_alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    /// Base model; defaults to `base.ckpt` in the data directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log; defaults to the adapter path with `.log` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub train: TrainOverrides,
}

/// Decoding flags. Unset values fall back to the sampler defaults.
#[derive(Args, Clone, Copy)]
pub struct DecodeArgs {
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub repetition_penalty: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

#[derive(Args)]
#[group(id = "report_source", required = true, multiple = false)]
pub struct ReportArgs {
    /// Findings text.
    #[arg(long, group = "report_source")]
    pub report: Option<String>,
    /// File holding the findings text.
    #[arg(long, group = "report_source")]
    pub report_file: Option<PathBuf>,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Quantize a float model to int4 before decoding (merging the adapter first).
    #[arg(long)]
    pub quant: bool,
    #[arg(long, default_value_t = dxgen::quant::DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
    /// Vocabulary; defaults to `vocab.json` beside the model.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Template; defaults to `template.txt` beside the model, else the built-in one.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// OSA, CFP or OCT, in any case.
    #[arg(long, value_parser = parse_modality)]
    pub modality: Modality,
    #[command(flatten)]
    pub report: ReportArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Model file; repeat to compare several.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Adapter file, or `none` for the bare model; repeat for several rows per model.
    #[arg(long = "adapter")]
    pub adapters: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Markdown table; the full per-record report goes to the same path plus `.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Score only the first N test records.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub quant: bool,
    /// Record `i` decodes with seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Adapter used for the inference half; the fine-tune half always starts fresh.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Records in each half of the workload.
    #[arg(long, default_value_t = 8)]
    pub records: usize,
    /// JSON report with every sample.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `--seed` seeds both the fine-tune and the decoding.
    #[command(flatten)]
    pub train: TrainOverrides,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

fn parse_modality(s: &str) -> Result<Modality, dxgen::Error> {
    s.to_ascii_uppercase().parse()
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("error: {}", one_line(first));
            return ExitCode::from(1);
        }
    };
    if cli.sequential {
        dxgen::parallel::set_enabled(false);
    }
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
