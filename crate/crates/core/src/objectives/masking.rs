//! Masking objectives: single-speaker sentence masking (gap-sentence
//! generation), rule-based word-mask candidate tagging, and word masking in
//! its two modes. Also the exact inverse: reconstructing the unmasked
//! instance from a masked example.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ObjectiveError, PackedInstance, PretrainExample};
use crate::corpus::{PRONOUNS, UNK_SPEAKER};
use crate::tokenizer::{Vocab, BOS, EOS, NUM_SPECIALS, SEP, UTT_MASK, WORD_MASK};

/// Verb stems recognized by the candidate tagger when a token ends with
/// `-ed`, `-ing`, or `-s`.
pub const VERB_STEMS: [&str; 50] = [
    "walk", "talk", "jump", "look", "ask", "call", "clean", "cook", "dance", "help", "laugh",
    "learn", "listen", "live", "love", "miss", "move", "need", "open", "paint", "play", "pull",
    "push", "rain", "show", "smile", "start", "stay", "stop", "study", "turn", "visit", "wait",
    "want", "wash", "watch", "work", "answer", "climb", "count", "cry", "dream", "end", "fix",
    "follow", "join", "kick", "kill", "like", "plan",
];

/// How word masking produces its training signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordMaskMode {
    /// Decoder regenerates the masked words: `target_ids` = original tokens
    /// of the masked positions in order, terminated by `EOS`.
    Generation,
    /// Encoder-side classification at masked positions; `target_ids` stays
    /// empty and originals live in `masked_word_originals`.
    MlmHead,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Sentence spans of a raw token stream: one span per `BOS`, ending before
/// the next sentence's `BOS` (or before a `SEP` directly preceding it).
fn token_spans(ids: &[u32]) -> Vec<(usize, usize)> {
    let starts: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == BOS)
        .map(|(p, _)| p)
        .collect();
    let n = starts.len();
    (0..n)
        .map(|i| {
            let end = if i + 1 < n {
                let next = starts[i + 1];
                if ids[next - 1] == SEP {
                    next - 1
                } else {
                    next
                }
            } else {
                ids.len()
            };
            (starts[i], end)
        })
        .collect()
}

/// Masks `k = max(1, round_half_up(ratio * num_sentences))` sentences of a
/// single speaker.
///
/// The speaker is chosen uniformly among speakers having at least `k`
/// sentences; if none qualifies, the speaker with the most sentences is used
/// (first appearance breaks ties) and `k` is clamped to that count. Each
/// selected sentence's span collapses to `[BOS, UTT_MASK]` in the encoder
/// input; the target concatenates, in sentence order, `UTT_MASK` followed by
/// the sentence's tokens (speaker tag included, `BOS` excluded), and is
/// terminated by `EOS`. Turn labels are computed before masking.
pub fn mask_sentences(
    instance: &PackedInstance,
    ratio: f64,
    rng_seed: u64,
) -> Result<PretrainExample, ObjectiveError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ObjectiveError::InvalidRatio(ratio));
    }
    let n = instance.sentence_starts.len();
    if n == 0 {
        return Err(ObjectiveError::EmptyInstance);
    }
    let mut k = round_half_up(ratio * n as f64).max(1);

    // Sentences per speaker, in first-appearance order.
    let mut by_speaker: IndexMap<&str, Vec<usize>> = IndexMap::new();
    for (i, speaker) in instance.sentence_speakers.iter().enumerate() {
        by_speaker.entry(speaker.as_str()).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut eligible: Vec<&str> = by_speaker
        .iter()
        .filter(|(_, sentences)| sentences.len() >= k)
        .map(|(speaker, _)| *speaker)
        .collect();
    eligible.sort_unstable();
    let chosen_speaker = if eligible.is_empty() {
        // Fallback: the speaker with the most sentences, first appearance
        // breaking ties; clamp k to what that speaker has.
        let (speaker, sentences) = by_speaker
            .iter()
            .fold(None, |best: Option<(&&str, &Vec<usize>)>, entry| {
                match best {
                    Some((_, s)) if s.len() >= entry.1.len() => best,
                    _ => Some(entry),
                }
            })
            .expect("n >= 1 implies at least one speaker");
        k = k.min(sentences.len());
        *speaker
    } else {
        eligible[rng.random_range(0..eligible.len())]
    };

    let pool = &by_speaker[chosen_speaker];
    let mut masked: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|j| pool[j])
        .collect();
    masked.sort_unstable();

    let spans = instance.sentence_spans();
    let mut encoder_ids = Vec::with_capacity(instance.token_ids.len());
    for (i, &(start, end)) in spans.iter().enumerate() {
        if i > 0 && instance.token_ids[start - 1] == SEP {
            encoder_ids.push(SEP);
        }
        if masked.binary_search(&i).is_ok() {
            encoder_ids.push(BOS);
            encoder_ids.push(UTT_MASK);
        } else {
            encoder_ids.extend_from_slice(&instance.token_ids[start..end]);
        }
    }

    let mut target_ids = Vec::new();
    for &i in &masked {
        let (start, end) = spans[i];
        target_ids.push(UTT_MASK);
        target_ids.extend_from_slice(&instance.token_ids[start + 1..end]);
    }
    target_ids.push(EOS);

    let sentence_starts = encoder_ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == BOS)
        .map(|(p, _)| p)
        .collect();

    Ok(PretrainExample {
        encoder_ids,
        target_ids,
        turn_labels: super::turn_labels(instance),
        sentence_starts,
        masked_sentence_indices: masked,
        masked_word_positions: Vec::new(),
        masked_word_originals: Vec::new(),
    })
}

/// Rule-based word-mask candidate positions: pronouns, verb-suffixed tokens
/// (`-ed`/`-ing`/`-s` over a known stem), and capitalized-in-source tokens
/// (the named-entity proxy). `BOS` and speaker-tag positions are excluded,
/// as are all special tokens.
pub fn annotate_candidates(instance: &PackedInstance, vocab: &Vocab) -> Vec<usize> {
    let mut tag_positions = Vec::new();
    for (i, &start) in instance.sentence_starts.iter().enumerate() {
        if instance.sentence_speakers[i] != UNK_SPEAKER {
            tag_positions.push(start + 1);
        }
    }
    instance
        .token_ids
        .iter()
        .enumerate()
        .filter(|&(pos, &id)| {
            if id < NUM_SPECIALS || tag_positions.binary_search(&pos).is_ok() {
                return false;
            }
            if instance.capitalized[pos] {
                return true;
            }
            let Some(token) = vocab.token(id) else {
                return false;
            };
            PRONOUNS.contains(&token) || has_verb_suffix(token)
        })
        .map(|(pos, _)| pos)
        .collect()
}

fn has_verb_suffix(token: &str) -> bool {
    for suffix in ["ed", "ing", "s"] {
        if let Some(stem) = token.strip_suffix(suffix) {
            if VERB_STEMS.contains(&stem) {
                return true;
            }
        }
    }
    false
}

fn select_word_masks(
    ids: &[u32],
    ratio: f64,
    candidates: &[usize],
    rng_seed: u64,
) -> Result<(Vec<usize>, Vec<u32>), ObjectiveError> {
    for &pos in candidates {
        if pos >= ids.len() || ids[pos] < NUM_SPECIALS {
            return Err(ObjectiveError::Reconstruction(format!(
                "word-mask candidate {pos} is out of range or points at a special token"
            )));
        }
    }
    if candidates.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let want = (ratio.max(0.0) * candidates.len() as f64).floor() as usize;
    let k = want.max(1).min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut positions: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), k)
        .into_iter()
        .map(|j| candidates[j])
        .collect();
    positions.sort_unstable();
    let originals = positions.iter().map(|&p| ids[p]).collect();
    Ok((positions, originals))
}

/// Masks `floor(ratio * |candidates|)` candidate positions (at least one
/// when any exist) with [`WORD_MASK`].
///
/// In [`WordMaskMode::Generation`] the target is the original tokens of the
/// masked positions in order plus `EOS`; in [`WordMaskMode::MlmHead`] the
/// target stays empty and classification originals are recorded instead.
/// With zero candidates the instance passes through unchanged.
pub fn mask_words(
    instance: &PackedInstance,
    ratio: f64,
    candidates: &[usize],
    rng_seed: u64,
    mode: WordMaskMode,
) -> Result<PretrainExample, ObjectiveError> {
    let (positions, originals) =
        select_word_masks(&instance.token_ids, ratio, candidates, rng_seed)?;
    let mut encoder_ids = instance.token_ids.clone();
    for &pos in &positions {
        encoder_ids[pos] = WORD_MASK;
    }
    let target_ids = match mode {
        WordMaskMode::Generation if !positions.is_empty() => {
            let mut t = originals.clone();
            t.push(EOS);
            t
        }
        _ => Vec::new(),
    };
    Ok(PretrainExample {
        encoder_ids,
        target_ids,
        turn_labels: super::turn_labels(instance),
        sentence_starts: instance.sentence_starts.clone(),
        masked_sentence_indices: Vec::new(),
        masked_word_positions: positions,
        masked_word_originals: originals,
    })
}

/// Applies head-mode word masking on top of an existing (typically
/// sentence-masked) example. `candidates` are positions in the example's
/// `encoder_ids`; generation target and sentence bookkeeping pass through.
pub fn mask_words_on_example(
    example: &PretrainExample,
    ratio: f64,
    candidates: &[usize],
    rng_seed: u64,
) -> Result<PretrainExample, ObjectiveError> {
    let (positions, originals) =
        select_word_masks(&example.encoder_ids, ratio, candidates, rng_seed)?;
    let mut out = example.clone();
    for &pos in &positions {
        out.encoder_ids[pos] = WORD_MASK;
    }
    out.masked_word_positions.extend(positions);
    out.masked_word_originals.extend(originals);
    Ok(out)
}

/// Translates candidate positions from unmasked-instance coordinates to the
/// coordinates of a sentence-masked example. Positions inside masked
/// sentences are dropped; later positions shift left by each masked span's
/// shrinkage (`span_len - 2`).
pub fn map_candidates_to_masked(
    instance: &PackedInstance,
    masked_sentence_indices: &[usize],
    candidates: &[usize],
) -> Vec<usize> {
    let spans = instance.sentence_spans();
    let masked_spans: Vec<(usize, usize)> = masked_sentence_indices
        .iter()
        .map(|&i| spans[i])
        .collect();
    candidates
        .iter()
        .filter_map(|&p| {
            let mut shift = 0usize;
            for &(start, end) in &masked_spans {
                if p >= start && p < end {
                    return None;
                }
                if p >= end {
                    shift += end - start - 2;
                }
            }
            Some(p - shift)
        })
        .collect()
}

/// Reconstructs the unmasked token stream and its sentence starts from a
/// masked example, exactly inverting sentence and word masking.
pub fn reconstruct_unmasked(
    example: &PretrainExample,
) -> Result<(Vec<u32>, Vec<usize>), ObjectiveError> {
    let mut ids = example.encoder_ids.clone();

    // Word masks first: positions refer to the (possibly sentence-masked)
    // encoder stream.
    for (&pos, &orig) in example
        .masked_word_positions
        .iter()
        .zip(&example.masked_word_originals)
    {
        if ids.get(pos).copied() != Some(WORD_MASK) {
            return Err(ObjectiveError::Reconstruction(format!(
                "position {pos} does not hold a word mask"
            )));
        }
        ids[pos] = orig;
    }

    if !example.masked_sentence_indices.is_empty() {
        let segments = parse_target_segments(&example.target_ids)?;
        if segments.len() != example.masked_sentence_indices.len() {
            return Err(ObjectiveError::Reconstruction(format!(
                "target holds {} masked-sentence segments but {} sentences were masked",
                segments.len(),
                example.masked_sentence_indices.len()
            )));
        }
        let spans = token_spans(&ids);
        let mut rebuilt = Vec::with_capacity(ids.len());
        let mut segment_iter = segments.into_iter();
        for (i, &(start, end)) in spans.iter().enumerate() {
            if i > 0 && ids[start - 1] == SEP {
                rebuilt.push(SEP);
            }
            if example.masked_sentence_indices.binary_search(&i).is_ok() {
                if end - start != 2 || ids[start + 1] != UTT_MASK {
                    return Err(ObjectiveError::Reconstruction(format!(
                        "sentence {i} is marked masked but its span is not [BOS, UTT_MASK]"
                    )));
                }
                rebuilt.push(BOS);
                rebuilt.extend(segment_iter.next().expect("segment count checked"));
            } else {
                rebuilt.extend_from_slice(&ids[start..end]);
            }
        }
        ids = rebuilt;
    }

    let starts = ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == BOS)
        .map(|(p, _)| p)
        .collect();
    Ok((ids, starts))
}

/// Splits a sentence-mask target (`UTT_MASK seg ... UTT_MASK seg EOS`) into
/// its per-sentence segments.
fn parse_target_segments(target: &[u32]) -> Result<Vec<Vec<u32>>, ObjectiveError> {
    if target.last() != Some(&EOS) {
        return Err(ObjectiveError::Reconstruction(
            "target does not end with EOS".into(),
        ));
    }
    let body = &target[..target.len() - 1];
    if body.first() != Some(&UTT_MASK) {
        return Err(ObjectiveError::Reconstruction(
            "target does not start with UTT_MASK".into(),
        ));
    }
    let mut segments = Vec::new();
    for &token in body {
        if token == UTT_MASK {
            segments.push(Vec::new());
        } else {
            segments.last_mut().expect("leading UTT_MASK").push(token);
        }
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, Dialogue, LengthProfile, Utterance};
    use crate::objectives::pack;
    use crate::tokenizer::build_vocab;
    use proptest::prelude::*;

    fn dialogue(speakers_and_texts: &[(&str, &str)], turn_info: bool) -> Dialogue {
        Dialogue {
            id: "d1".into(),
            source: "t".into(),
            has_turn_info: turn_info,
            utterances: speakers_and_texts
                .iter()
                .map(|(s, t)| Utterance {
                    speaker: s.to_string(),
                    text: t.to_string(),
                })
                .collect(),
        }
    }

    fn instance_of(d: &Dialogue) -> (PackedInstance, Vocab) {
        let vocab = build_vocab(std::slice::from_ref(d), 4096).unwrap();
        let packed = pack(std::slice::from_ref(d), 4096, &vocab).unwrap();
        (packed.into_iter().next().unwrap(), vocab)
    }

    #[test]
    fn k_follows_round_half_up() {
        let utts: Vec<(&str, &str)> = (0..10).map(|_| ("A", "a b c")).collect();
        let (inst, _) = instance_of(&dialogue(&utts, true));
        let ex = mask_sentences(&inst, 0.18, 1).unwrap();
        assert_eq!(ex.masked_sentence_indices.len(), 2); // round_half_up(1.8)
        let ex = mask_sentences(&inst, 0.12, 1).unwrap();
        assert_eq!(ex.masked_sentence_indices.len(), 1); // round_half_up(1.2)
        let ex = mask_sentences(&inst, 0.15, 1).unwrap();
        assert_eq!(ex.masked_sentence_indices.len(), 2); // round_half_up(1.5)
    }

    #[test]
    fn single_sentence_is_always_masked() {
        let d = dialogue(&[("UNK", "hello there friend")], false);
        let (inst, _) = instance_of(&d);
        let ex = mask_sentences(&inst, 0.12, 9).unwrap();
        assert_eq!(ex.masked_sentence_indices, vec![0]);
        assert_eq!(ex.encoder_ids, vec![BOS, UTT_MASK]);
        // Target: UTT_MASK, the sentence's words, EOS.
        assert_eq!(ex.target_ids.len(), 5);
        assert_eq!(ex.target_ids[0], UTT_MASK);
        assert_eq!(*ex.target_ids.last().unwrap(), EOS);
    }

    #[test]
    fn masked_spans_collapse_and_target_is_addressable() {
        let d = dialogue(
            &[("A", "one two"), ("B", "three four"), ("A", "five six")],
            true,
        );
        let (inst, _) = instance_of(&d);
        // ratio 0.5 over 3 sentences -> k = 2; only A has 2 sentences.
        let ex = mask_sentences(&inst, 0.5, 3).unwrap();
        assert_eq!(ex.masked_sentence_indices, vec![0, 2]);
        // Sentence 1 (B) survives; spans 0 and 2 are [BOS, UTT_MASK].
        assert_eq!(ex.encoder_ids[0], BOS);
        assert_eq!(ex.encoder_ids[1], UTT_MASK);
        let starts = &ex.sentence_starts;
        assert_eq!(starts.len(), 3);
        assert_eq!(&ex.encoder_ids[starts[2]..], &[BOS, UTT_MASK]);
        // Target = UTT_MASK tagA one two UTT_MASK tagA five six EOS.
        let masks: Vec<usize> = ex
            .target_ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == UTT_MASK)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(masks, vec![0, 4]);
        assert_eq!(ex.target_ids.len(), 9);
    }

    #[test]
    fn masking_rejects_bad_ratio() {
        let (inst, _) = instance_of(&dialogue(&[("A", "a b")], true));
        assert!(matches!(
            mask_sentences(&inst, 0.0, 1),
            Err(ObjectiveError::InvalidRatio(_))
        ));
        assert!(matches!(
            mask_sentences(&inst, 1.0, 1),
            Err(ObjectiveError::InvalidRatio(_))
        ));
    }

    #[test]
    fn masking_is_deterministic_per_seed() {
        let corpus = synth_corpus(
            3,
            true,
            LengthProfile {
                min_utterances: 4,
                max_utterances: 8,
                min_words: 2,
                max_words: 5,
            },
            3,
            5,
        )
        .unwrap();
        let vocab = build_vocab(&corpus, 2048).unwrap();
        let inst = &pack(&corpus, 512, &vocab).unwrap()[0];
        assert_eq!(
            mask_sentences(inst, 0.18, 7).unwrap(),
            mask_sentences(inst, 0.18, 7).unwrap()
        );
    }

    #[test]
    fn fallback_clamps_k_to_largest_speaker() {
        // Four speakers with one sentence each; ratio 0.5 asks for k=2 but
        // nobody has 2 sentences.
        let d = dialogue(
            &[("A", "a a"), ("B", "b b"), ("C", "c c"), ("D", "d d")],
            true,
        );
        let (inst, _) = instance_of(&d);
        let ex = mask_sentences(&inst, 0.5, 11).unwrap();
        assert_eq!(ex.masked_sentence_indices.len(), 1);
        // First-appearance tie-break picks speaker A.
        assert_eq!(ex.masked_sentence_indices, vec![0]);
    }

    #[test]
    fn annotate_fires_on_pronouns_and_verbs() {
        let d = dialogue(&[("UNK", "she walked home")], false);
        let (inst, vocab) = instance_of(&d);
        // Stream: BOS she walked home -> word positions 1..=3.
        assert_eq!(annotate_candidates(&inst, &vocab), vec![1, 2]);
    }

    #[test]
    fn annotate_silent_without_rules() {
        let d = dialogue(&[("UNK", "the cat")], false);
        let (inst, vocab) = instance_of(&d);
        assert!(annotate_candidates(&inst, &vocab).is_empty());
    }

    #[test]
    fn annotate_flags_capitalized_source_tokens() {
        let d = dialogue(&[("UNK", "Kim07 naps")], false);
        let (inst, vocab) = instance_of(&d);
        // "kim07" is capitalized in source; "naps" has no known stem.
        assert_eq!(annotate_candidates(&inst, &vocab), vec![1]);
    }

    #[test]
    fn annotate_excludes_speaker_tag_positions() {
        // Speaker key "she" renders a tag token identical to a pronoun; the
        // tag position must not become a candidate, the text one must.
        let d = dialogue(&[("she", "she naps")], true);
        let (inst, vocab) = instance_of(&d);
        assert_eq!(annotate_candidates(&inst, &vocab), vec![2]);
    }

    #[test]
    fn word_mask_counts_and_modes() {
        let utts: Vec<(&str, &str)> =
            vec![("UNK", "she walked they talked we jumped he looked it asks")];
        let (inst, vocab) = instance_of(&dialogue(&utts, false));
        let candidates = annotate_candidates(&inst, &vocab);
        assert_eq!(candidates.len(), 10);
        let ex = mask_words(&inst, 0.12, &candidates, 3, WordMaskMode::Generation).unwrap();
        assert_eq!(ex.masked_word_positions.len(), 1); // floor(1.2)
        assert_eq!(ex.target_ids.len(), 2);
        assert_eq!(*ex.target_ids.last().unwrap(), EOS);
        assert_eq!(ex.target_ids[0], ex.masked_word_originals[0]);
        assert_eq!(
            ex.encoder_ids[ex.masked_word_positions[0]],
            WORD_MASK
        );

        let ex = mask_words(&inst, 0.12, &candidates, 3, WordMaskMode::MlmHead).unwrap();
        assert!(ex.target_ids.is_empty());
        assert_eq!(ex.masked_word_positions.len(), 1);
    }

    #[test]
    fn word_mask_with_zero_candidates_is_identity() {
        let (inst, _) = instance_of(&dialogue(&[("UNK", "the cat")], false));
        let ex = mask_words(&inst, 0.5, &[], 3, WordMaskMode::Generation).unwrap();
        assert_eq!(ex.encoder_ids, inst.token_ids);
        assert!(ex.masked_word_positions.is_empty());
        assert!(ex.target_ids.is_empty());
    }

    #[test]
    fn word_masks_stay_within_candidates() {
        let utts: Vec<(&str, &str)> = vec![("UNK", "she walks and he talks and it jumps")];
        let (inst, vocab) = instance_of(&dialogue(&utts, false));
        let candidates = annotate_candidates(&inst, &vocab);
        for seed in 0..20 {
            let ex = mask_words(&inst, 0.5, &candidates, seed, WordMaskMode::MlmHead).unwrap();
            for p in &ex.masked_word_positions {
                assert!(candidates.contains(p));
            }
        }
    }

    #[test]
    fn candidate_mapping_drops_masked_and_shifts() {
        let d = dialogue(
            &[("A", "she walked"), ("B", "he talked"), ("A", "they jumped")],
            true,
        );
        let (inst, vocab) = instance_of(&d);
        let candidates = annotate_candidates(&inst, &vocab);
        // Spans are 4 tokens each: [BOS tag w w][BOS tag w w][BOS tag w w];
        // candidates at 2,3, 6,7, 10,11.
        assert_eq!(candidates, vec![2, 3, 6, 7, 10, 11]);
        // Mask sentence 0: its candidates vanish, later ones shift by 2.
        let mapped = map_candidates_to_masked(&inst, &[0], &candidates);
        assert_eq!(mapped, vec![4, 5, 8, 9]);
    }

    #[test]
    fn combined_sentence_and_word_masking_reconstructs() {
        let d = dialogue(
            &[("A", "she walked far"), ("B", "he talked fast"), ("A", "they jumped")],
            true,
        );
        let (inst, vocab) = instance_of(&d);
        let ex = mask_sentences(&inst, 0.34, 2).unwrap();
        let candidates = annotate_candidates(&inst, &vocab);
        let mapped = map_candidates_to_masked(&inst, &ex.masked_sentence_indices, &candidates);
        let combined = mask_words_on_example(&ex, 0.3, &mapped, 5).unwrap();
        assert!(!combined.masked_word_positions.is_empty());
        let (ids, starts) = reconstruct_unmasked(&combined).unwrap();
        assert_eq!(ids, inst.token_ids);
        assert_eq!(starts, inst.sentence_starts);
    }

    #[test]
    fn reconstruction_detects_corruption() {
        let d = dialogue(&[("A", "a b c"), ("A", "d e f")], true);
        let (inst, _) = instance_of(&d);
        let mut ex = mask_sentences(&inst, 0.4, 1).unwrap();
        ex.target_ids.pop(); // strip EOS
        assert!(reconstruct_unmasked(&ex).is_err());
    }

    fn masking_profile() -> LengthProfile {
        LengthProfile {
            min_utterances: 2,
            max_utterances: 8,
            min_words: 2,
            max_words: 6,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn masked_sentences_share_one_speaker(seed in 0u64..4000) {
            let corpus = synth_corpus(4, true, masking_profile(), 3, seed).unwrap();
            let vocab = build_vocab(&corpus, 2048).unwrap();
            for inst in pack(&corpus, 256, &vocab).unwrap() {
                let ex = mask_sentences(&inst, 0.18, seed ^ 0xabc).unwrap();
                let speakers: std::collections::HashSet<&str> = ex
                    .masked_sentence_indices
                    .iter()
                    .map(|&i| inst.sentence_speakers[i].as_str())
                    .collect();
                prop_assert_eq!(speakers.len(), 1);
            }
        }

        #[test]
        fn splice_round_trip_is_exact(seed in 0u64..4000) {
            let corpus = synth_corpus(4, true, masking_profile(), 3, seed).unwrap();
            let vocab = build_vocab(&corpus, 2048).unwrap();
            for inst in pack(&corpus, 256, &vocab).unwrap() {
                let ex = mask_sentences(&inst, 0.18, seed.wrapping_mul(31)).unwrap();
                prop_assert!(ex.encoder_ids.len() < inst.token_ids.len());
                prop_assert_eq!(ex.turn_labels.len(), inst.sentence_starts.len());
                let (ids, starts) = reconstruct_unmasked(&ex).unwrap();
                prop_assert_eq!(ids, inst.token_ids.clone());
                prop_assert_eq!(starts, inst.sentence_starts.clone());
            }
        }

        #[test]
        fn realized_ratio_within_one_sentence(seed in 0u64..2000) {
            let corpus = synth_corpus(6, true, masking_profile(), 2, seed).unwrap();
            let vocab = build_vocab(&corpus, 2048).unwrap();
            let ratio = 0.18;
            for inst in pack(&corpus, 512, &vocab).unwrap() {
                let n = inst.sentence_starts.len() as f64;
                let k_wanted = ((ratio * n + 0.5).floor() as usize).max(1);
                let has_eligible = {
                    let mut counts = std::collections::HashMap::new();
                    for s in &inst.sentence_speakers {
                        *counts.entry(s).or_insert(0usize) += 1;
                    }
                    counts.values().any(|&c| c >= k_wanted)
                };
                if has_eligible {
                    let ex = mask_sentences(&inst, ratio, seed ^ 7).unwrap();
                    let realized = ex.masked_sentence_indices.len() as f64 / n;
                    prop_assert!(realized >= ratio - 1.0 / n - 1e-12);
                    prop_assert!(realized <= ratio + 1.0 / n + 1e-12);
                }
            }
        }

        #[test]
        fn word_mask_positions_subset_of_candidates(seed in 0u64..1000) {
            let corpus = synth_corpus(2, true, masking_profile(), 2, seed).unwrap();
            let vocab = build_vocab(&corpus, 2048).unwrap();
            for inst in pack(&corpus, 256, &vocab).unwrap() {
                let candidates = annotate_candidates(&inst, &vocab);
                let ex = mask_words(&inst, 0.12, &candidates, seed, WordMaskMode::MlmHead).unwrap();
                for p in &ex.masked_word_positions {
                    prop_assert!(candidates.binary_search(p).is_ok());
                }
                let (ids, _) = reconstruct_unmasked(&ex).unwrap();
                prop_assert_eq!(ids, inst.token_ids.clone());
            }
        }
    }
}
