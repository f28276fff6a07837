//! Shard preparation: pack a corpus under a token cap, mask sentences with
//! seeds fixed at preparation time, and write everything a training run
//! needs into one directory.

use anyhow::{bail, Context, Result};
use turnforge_core::corpus::{corpus_stats, ingest_jsonl, Dialogue, Utterance, UNK_SPEAKER};
use turnforge_core::mix_seed;
use turnforge_core::objectives::shard::write_shard;
use turnforge_core::objectives::{
    build_s2_variants, mask_sentences, pack, PackedInstance, PretrainExample,
};
use turnforge_core::tokenizer::{build_vocab, Vocab, EOS};

use crate::manifest::{create_run_dir, RunManifest};
use crate::{effective_seed, PrepStage, PrepareArgs};

/// Replaces every speaker with the unknown marker, for speaker-blind
/// packing of a corpus that may carry real speaker keys.
fn strip_speakers(dialogue: &Dialogue) -> Dialogue {
    Dialogue {
        id: dialogue.id.clone(),
        source: dialogue.source.clone(),
        has_turn_info: false,
        utterances: dialogue
            .utterances
            .iter()
            .map(|u| Utterance {
                speaker: UNK_SPEAKER.to_string(),
                text: u.text.clone(),
            })
            .collect(),
    }
}

/// Truncates an over-long decoder target in place, keeping a terminal EOS.
/// A truncated target can no longer be unmasked back into the original
/// stream, so this is opt-in via `--target-cap`.
fn truncate_target(example: &mut PretrainExample, target_cap: usize) {
    if example.target_ids.len() > target_cap {
        example.target_ids.truncate(target_cap - 1);
        example.target_ids.push(EOS);
    }
}

pub fn run(args: &PrepareArgs) -> Result<()> {
    let seed = effective_seed(args.seed);
    let cap = args.cap.unwrap_or_else(|| args.stage.default_cap());
    let mask_ratio = args
        .mask_ratio
        .unwrap_or_else(|| args.stage.default_mask_ratio());
    if let Some(tc) = args.target_cap {
        if tc < 2 {
            bail!("--target-cap must be >= 2, got {tc}");
        }
    }

    create_run_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("prepare", seed);
    manifest.input("corpus", &args.corpus);
    if let Some(vocab_path) = &args.vocab {
        manifest.input("vocab", vocab_path);
    }
    manifest.detail("stage", args.stage.slug());
    manifest.detail("cap", cap);
    manifest.detail("mask_ratio", mask_ratio);
    manifest.write(&args.out_dir)?;

    let corpus = ingest_jsonl(&args.corpus)
        .with_context(|| format!("ingest {}", args.corpus.display()))?;

    // The vocabulary always comes from the corpus as read, so one corpus
    // yields one vocabulary that both speaker-blind and speaker-aware
    // shards can share.
    let vocab = match (&args.vocab, args.vocab_size) {
        (Some(path), None) => {
            Vocab::load(path).with_context(|| format!("load vocab {}", path.display()))?
        }
        (None, Some(size)) => build_vocab(&corpus, size).context("build vocabulary")?,
        (None, None) => bail!("pass exactly one of --vocab or --vocab-size"),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };

    let instances: Vec<PackedInstance> = match args.stage {
        PrepStage::S1 => {
            let stripped: Vec<Dialogue> = corpus.iter().map(strip_speakers).collect();
            pack(&stripped, cap, &vocab).context("pack speaker-blind corpus")?
        }
        PrepStage::S2Short => build_s2_variants(&corpus, cap, &vocab)?.short,
        PrepStage::S2Long => build_s2_variants(&corpus, cap, &vocab)?.long,
        PrepStage::S2Both => build_s2_variants(&corpus, cap, &vocab)?.both,
    };
    if instances.is_empty() {
        bail!("corpus produced no instances");
    }
    let packed_lengths: Vec<usize> = instances.iter().map(|i| i.token_ids.len()).collect();

    let mut examples = Vec::with_capacity(instances.len());
    for (i, instance) in instances.iter().enumerate() {
        let mut example = mask_sentences(instance, mask_ratio, mix_seed(seed, i as u64))
            .with_context(|| format!("mask instance {i}"))?;
        if let Some(tc) = args.target_cap {
            truncate_target(&mut example, tc);
        }
        examples.push(example);
    }

    let vocab_path = args.out_dir.join("vocab.txt");
    vocab.save(&vocab_path).context("write vocab.txt")?;
    let shard_name = format!("{}.shard", args.stage.slug());
    write_shard(&args.out_dir.join(&shard_name), &examples).context("write shard")?;
    let stats = corpus_stats(&corpus)
        .context("compute statistics")?
        .with_packed_lengths(&packed_lengths);
    std::fs::write(
        args.out_dir.join("stats.json"),
        serde_json::to_string_pretty(&stats)?,
    )
    .context("write stats.json")?;

    manifest.detail("n_dialogues", corpus.len());
    manifest.detail("n_instances", instances.len());
    manifest.detail("vocab_size", vocab.size());
    manifest.finalize(
        &args.out_dir,
        vec!["vocab.txt".into(), shard_name.clone(), "stats.json".into()],
    )?;
    println!(
        "prepared {} examples into {}/{} (vocab {} entries)",
        examples.len(),
        args.out_dir.display(),
        shard_name,
        vocab.size()
    );
    Ok(())
}
