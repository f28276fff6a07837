//! Corpus-level commands: synthesize, ingest/normalize, and summarize.

use anyhow::{Context, Result};
use turnforge_core::corpus::{
    corpus_stats, ingest_jsonl, synth_corpus, write_jsonl, LengthProfile,
};

use crate::{effective_seed, IngestArgs, StatsArgs, SynthArgs};

pub fn synth(args: &SynthArgs) -> Result<()> {
    let seed = effective_seed(args.seed);
    let profile = LengthProfile {
        min_utterances: args.min_utterances,
        max_utterances: args.max_utterances,
        min_words: args.min_words,
        max_words: args.max_words,
    };
    let corpus = synth_corpus(args.n, args.turn_info, profile, args.speakers, seed)
        .context("generate corpus")?;
    write_jsonl(&args.out, &corpus)
        .with_context(|| format!("write {}", args.out.display()))?;
    println!("wrote {} dialogues to {}", corpus.len(), args.out.display());
    Ok(())
}

pub fn ingest(args: &IngestArgs) -> Result<()> {
    let corpus = ingest_jsonl(&args.input)
        .with_context(|| format!("ingest {}", args.input.display()))?;
    write_jsonl(&args.output, &corpus)
        .with_context(|| format!("write {}", args.output.display()))?;
    println!(
        "ingested {} dialogues from {} into {}",
        corpus.len(),
        args.input.display(),
        args.output.display()
    );
    Ok(())
}

pub fn stats(args: &StatsArgs) -> Result<()> {
    let corpus = ingest_jsonl(&args.corpus)
        .with_context(|| format!("ingest {}", args.corpus.display()))?;
    let stats = corpus_stats(&corpus).context("compute statistics")?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}
