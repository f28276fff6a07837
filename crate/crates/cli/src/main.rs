//! `turnforge` — command-line driver for dialogue-summarization
//! pre-training: synthesize or ingest corpora, pack and mask them into
//! binary shards, run training stages, and score checkpoints.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "turnforge",
    version,
    about = "Speaker-aware dialogue summarization pre-training toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dialogue corpus as JSONL.
    Synth(SynthArgs),
    /// Validate and normalize an external JSONL corpus.
    Ingest(IngestArgs),
    /// Print aggregate corpus statistics as JSON.
    Stats(StatsArgs),
    /// Pack a corpus into masked training shards plus vocabulary and stats.
    Prepare(PrepareArgs),
    /// Train a stage from a config file, optionally from an initial
    /// checkpoint or resuming a stopped run.
    Pretrain(TrainArgs),
    /// Fine-tune from a required initial checkpoint (stage must be
    /// "finetune"); position tables may grow relative to the checkpoint.
    Finetune(TrainArgs),
    /// Greedy-decode a shard against its targets and score it.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of dialogues.
    #[arg(long)]
    n: usize,
    /// Attach real speaker keys (otherwise every speaker is "UNK").
    #[arg(long)]
    turn_info: bool,
    /// Speaker pool size per dialogue.
    #[arg(long, default_value_t = 4)]
    speakers: usize,
    #[arg(long)]
    seed: u64,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    min_utterances: usize,
    #[arg(long, default_value_t = 12)]
    max_utterances: usize,
    #[arg(long, default_value_t = 3)]
    min_words: usize,
    #[arg(long, default_value_t = 10)]
    max_words: usize,
}

#[derive(Args)]
struct IngestArgs {
    /// Input JSONL path.
    #[arg(long)]
    input: PathBuf,
    /// Normalized output JSONL path.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Corpus JSONL path.
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrepStage {
    /// Speaker-blind packing across dialogues.
    S1,
    /// One truncated instance per dialogue, speaker tags kept.
    S2Short,
    /// Near-cap packing across dialogues, speaker tags kept.
    S2Long,
    /// Short and long instances together.
    S2Both,
}

impl PrepStage {
    fn slug(self) -> &'static str {
        match self {
            PrepStage::S1 => "s1",
            PrepStage::S2Short => "s2_short",
            PrepStage::S2Long => "s2_long",
            PrepStage::S2Both => "s2_both",
        }
    }

    fn default_cap(self) -> usize {
        match self {
            PrepStage::S1 => 4096,
            _ => 1400,
        }
    }

    fn default_mask_ratio(self) -> f64 {
        match self {
            PrepStage::S1 => 0.12,
            _ => 0.18,
        }
    }
}

#[derive(Args)]
struct PrepareArgs {
    /// Corpus JSONL path.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    stage: PrepStage,
    /// Encoder token cap per packed instance (default depends on stage).
    #[arg(long)]
    cap: Option<usize>,
    /// Fraction of sentences masked per instance (default depends on stage).
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Truncate decoder targets to this many tokens (terminal EOS kept).
    /// Truncated targets cannot be unmasked back to the original stream,
    /// so leave this unset for shards that will be evaluated.
    #[arg(long)]
    target_cap: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Fresh run directory for vocab.txt, the shard, stats.json and
    /// manifest.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Build a new vocabulary of at most this many entries.
    #[arg(long, conflicts_with = "vocab")]
    vocab_size: Option<usize>,
    /// Reuse an existing vocabulary file.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config with [model] and [train] tables.
    #[arg(long)]
    config: PathBuf,
    /// Input shard of masked examples.
    #[arg(long)]
    shard: PathBuf,
    /// Fresh run directory for the checkpoint, metrics and manifest.
    #[arg(long)]
    out_dir: PathBuf,
    /// Checkpoint prefix to initialize weights from (optimizer starts
    /// fresh).
    #[arg(long, conflicts_with = "resume")]
    init_ckpt: Option<PathBuf>,
    /// Previous run directory to resume bit-identically from its final
    /// checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once the global optimizer step count reaches this value.
    #[arg(long)]
    stop_after_steps: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint prefix to score.
    #[arg(long)]
    ckpt: PathBuf,
    /// Shard of masked examples to decode.
    #[arg(long)]
    shard: PathBuf,
    /// Vocabulary file for detokenization.
    #[arg(long)]
    vocab: PathBuf,
    /// Output JSONL report path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    max_decode_len: usize,
    /// Decision threshold for turn-switch scores.
    #[arg(long, default_value_t = turnforge_core::evaluation::TURN_THRESHOLD)]
    threshold: f64,
}

/// Returns the seed to use, honoring a `TURNFORGE_SEED` environment
/// override (reported on stderr when active).
fn effective_seed(cli_seed: u64) -> u64 {
    match std::env::var("TURNFORGE_SEED") {
        Ok(raw) => match raw.parse::<u64>() {
            Ok(seed) => {
                eprintln!("TURNFORGE_SEED={seed} overrides --seed {cli_seed}");
                seed
            }
            Err(_) => {
                eprintln!("ignoring unparseable TURNFORGE_SEED={raw:?}");
                cli_seed
            }
        },
        Err(_) => cli_seed,
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth(args) => commands::corpus_ops::synth(&args),
        Command::Ingest(args) => commands::corpus_ops::ingest(&args),
        Command::Stats(args) => commands::corpus_ops::stats(&args),
        Command::Prepare(args) => commands::prepare::run(&args),
        Command::Pretrain(args) => commands::train::run(&args, false),
        Command::Finetune(args) => commands::train::run(&args, true),
        Command::Eval(args) => commands::eval::run(&args),
    }
}
