//! Checkpoint scoring: greedy decoding against shard targets plus pooled
//! turn-switch quality, written as one JSONL report.

use std::fs::File;
use std::io::{BufWriter, Write};

use anyhow::{Context, Result};
use serde_json::json;
use turnforge_core::evaluation::evaluate_split;
use turnforge_core::model::load_checkpoint;
use turnforge_core::objectives::shard::read_shard;
use turnforge_core::tokenizer::Vocab;

use crate::EvalArgs;

pub fn run(args: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint::<f64>(&args.ckpt)
        .with_context(|| format!("load checkpoint {}", args.ckpt.display()))?;
    let (params, _extras) = ckpt.into_parts().context("split checkpoint")?;
    let vocab = Vocab::load(&args.vocab)
        .with_context(|| format!("load vocab {}", args.vocab.display()))?;
    let examples = read_shard(&args.shard)
        .with_context(|| format!("read shard {}", args.shard.display()))?;

    let outcome = evaluate_split(&params, &vocab, &examples, args.max_decode_len, args.threshold)
        .context("evaluation failed")?;

    let mut out = BufWriter::new(
        File::create(&args.out).with_context(|| format!("create {}", args.out.display()))?,
    );
    for (i, row) in outcome.per_example.iter().enumerate() {
        let line = json!({
            "id": i,
            "candidate": row.candidate,
            "reference": row.reference,
            "r1": row.r1,
            "r2": row.r2,
            "rl": row.rl,
        });
        writeln!(out, "{line}")?;
    }
    let trailer = json!({
        "corpus": true,
        "r1": outcome.rouge.r1,
        "r2": outcome.rouge.r2,
        "rl": outcome.rouge.rl,
        "rg": outcome.rouge.rg,
        "turn_f1": outcome.turn.f1,
        "turn_precision": outcome.turn.precision,
        "turn_recall": outcome.turn.recall,
    });
    writeln!(out, "{trailer}")?;
    out.flush()?;

    println!(
        "scored {} examples: r1 {:.2} r2 {:.2} rl {:.2} rg {:.2} turn_f1 {:.3} -> {}",
        outcome.per_example.len(),
        outcome.rouge.r1,
        outcome.rouge.r2,
        outcome.rouge.rl,
        outcome.rouge.rg,
        outcome.turn.f1,
        args.out.display()
    );
    Ok(())
}
