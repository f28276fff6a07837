//! Training-example construction: rendering dialogues to token sequences,
//! greedy packing under a token cap, stage-2 corpus variants, and
//! turn-switch labels. Masking objectives live in [`masking`]; the binary
//! shard format lives in [`shard`].

mod masking;
pub mod shard;

pub use masking::{
    annotate_candidates, map_candidates_to_masked, mask_sentences, mask_words,
    mask_words_on_example, reconstruct_unmasked, WordMaskMode,
};

use thiserror::Error;

use crate::corpus::{Dialogue, UNK_SPEAKER};
use crate::tokenizer::{speaker_tag, Vocab, BOS, SEP};

/// Smallest supported packing cap; tighter caps cannot hold a sentence
/// marker, speaker tag, and a useful amount of text.
pub const MIN_CAP: usize = 16;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("packing cap must be >= {MIN_CAP}, got {0}")]
    CapTooSmall(usize),
    #[error("mask ratio must lie in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("instance has no sentences")]
    EmptyInstance,
    #[error("dialogue {0:?} lacks turn info required by stage-2 variants")]
    TurnInfoRequired(String),
    #[error("cannot reconstruct example: {0}")]
    Reconstruction(String),
}

/// One fixed-budget training sequence: one or more dialogues rendered to
/// token ids and concatenated with [`SEP`] between dialogues.
///
/// Each sentence (= utterance) is rendered as `BOS, speaker-tag token,
/// words...`; unattributed (`"UNK"`) speakers contribute no tag token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedInstance {
    /// Rendered token ids; length <= the packing cap.
    pub token_ids: Vec<u32>,
    /// Positions of the [`BOS`] marker of each sentence; strictly increasing.
    pub sentence_starts: Vec<usize>,
    /// Speaker key of each sentence; parallel to `sentence_starts`.
    pub sentence_speakers: Vec<String>,
    /// Index into `origin_ids` of the dialogue each sentence came from.
    pub sentence_origins: Vec<usize>,
    /// Ids of the dialogues contributing to this instance, in order.
    pub origin_ids: Vec<String>,
    /// Whether each token was capitalized in the source text (the
    /// named-entity proxy for word-mask candidates); specials are `false`.
    pub capitalized: Vec<bool>,
}

/// One unit of training: a masked encoder input, its decoder target, and
/// the per-sentence turn labels of the unmasked instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainExample {
    /// Token ids after masking.
    pub encoder_ids: Vec<u32>,
    /// Decoder target sequence; ends with `EOS` whenever any sentence is
    /// masked. Empty for head-mode word masking.
    pub target_ids: Vec<u32>,
    /// Turn-switch label per sentence, computed before masking.
    pub turn_labels: Vec<bool>,
    /// `BOS` positions in `encoder_ids`.
    pub sentence_starts: Vec<usize>,
    /// Ordinals of sentences replaced by `[BOS, UTT_MASK]`, ascending.
    pub masked_sentence_indices: Vec<usize>,
    /// Positions in `encoder_ids` replaced by `WORD_MASK`, ascending.
    pub masked_word_positions: Vec<usize>,
    /// Original token ids at `masked_word_positions`, parallel to it.
    pub masked_word_originals: Vec<u32>,
}

/// Stage-2 corpus variants built by [`build_s2_variants`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct S2Variants {
    /// One instance per dialogue, truncated at the cap; never packed.
    pub short: Vec<PackedInstance>,
    /// Greedily packed near-cap instances.
    pub long: Vec<PackedInstance>,
    /// `short` followed by `long`.
    pub both: Vec<PackedInstance>,
}

/// One dialogue sentence rendered to token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedSentence {
    /// `BOS`, optional speaker-tag token, then encoded words.
    pub ids: Vec<u32>,
    pub speaker: String,
    /// Source-capitalization flag per token; `false` at `BOS`/tag.
    pub capitalized: Vec<bool>,
}

/// Renders a dialogue's utterances to token sequences.
pub fn render_dialogue(vocab: &Vocab, dialogue: &Dialogue) -> Vec<RenderedSentence> {
    dialogue
        .utterances
        .iter()
        .map(|utt| {
            let mut ids = vec![BOS];
            let mut capitalized = vec![false];
            if utt.speaker != UNK_SPEAKER {
                let tag = speaker_tag(&utt.speaker);
                ids.push(vocab.token_id(&tag).unwrap_or(crate::tokenizer::UNK));
                capitalized.push(false);
            }
            for word in utt.text.split_whitespace() {
                ids.extend(vocab.encode(word));
                capitalized.push(word.chars().next().is_some_and(char::is_uppercase));
            }
            debug_assert_eq!(ids.len(), capitalized.len());
            RenderedSentence {
                ids,
                speaker: utt.speaker.clone(),
                capitalized,
            }
        })
        .collect()
}

/// Accumulates rendered sentences into one [`PackedInstance`].
struct InstanceBuilder {
    token_ids: Vec<u32>,
    sentence_starts: Vec<usize>,
    sentence_speakers: Vec<String>,
    sentence_origins: Vec<usize>,
    origin_ids: Vec<String>,
    capitalized: Vec<bool>,
}

impl InstanceBuilder {
    fn new() -> Self {
        InstanceBuilder {
            token_ids: Vec::new(),
            sentence_starts: Vec::new(),
            sentence_speakers: Vec::new(),
            sentence_origins: Vec::new(),
            origin_ids: Vec::new(),
            capitalized: Vec::new(),
        }
    }

    fn len(&self) -> usize {
        self.token_ids.len()
    }

    fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Starts a new dialogue section, inserting a separator when the
    /// instance already holds content.
    fn open_dialogue(&mut self, id: &str) {
        if !self.is_empty() {
            self.token_ids.push(SEP);
            self.capitalized.push(false);
        }
        self.origin_ids.push(id.to_string());
    }

    /// Appends one sentence, optionally truncated to `limit` tokens.
    fn push_sentence(&mut self, sentence: &RenderedSentence, limit: Option<usize>) {
        let take = limit.unwrap_or(sentence.ids.len()).min(sentence.ids.len());
        self.sentence_starts.push(self.token_ids.len());
        self.sentence_speakers.push(sentence.speaker.clone());
        self.sentence_origins.push(self.origin_ids.len() - 1);
        self.token_ids.extend_from_slice(&sentence.ids[..take]);
        self.capitalized.extend_from_slice(&sentence.capitalized[..take]);
    }

    fn finish(self) -> PackedInstance {
        PackedInstance {
            token_ids: self.token_ids,
            sentence_starts: self.sentence_starts,
            sentence_speakers: self.sentence_speakers,
            sentence_origins: self.sentence_origins,
            origin_ids: self.origin_ids,
            capitalized: self.capitalized,
        }
    }
}

/// Packs dialogues greedily, in corpus order, into instances of at most
/// `cap` tokens.
///
/// Whole dialogues are appended (one [`SEP`] between dialogues) while the
/// total stays within the cap. A dialogue that does not fit into an empty
/// instance is truncated at the last utterance boundary that fits; if even
/// its first utterance overflows, that utterance is tail-truncated. No
/// reordering, no splitting across instances: truncated tails are dropped.
pub fn pack(
    dialogues: &[Dialogue],
    cap: usize,
    vocab: &Vocab,
) -> Result<Vec<PackedInstance>, ObjectiveError> {
    if cap < MIN_CAP {
        return Err(ObjectiveError::CapTooSmall(cap));
    }
    let mut instances = Vec::new();
    let mut current = InstanceBuilder::new();
    for dialogue in dialogues {
        let sentences = render_dialogue(vocab, dialogue);
        let total: usize = sentences.iter().map(|s| s.ids.len()).sum();
        let sep_cost = usize::from(!current.is_empty());
        if current.len() + sep_cost + total <= cap {
            current.open_dialogue(&dialogue.id);
            for sentence in &sentences {
                current.push_sentence(sentence, None);
            }
            continue;
        }
        if !current.is_empty() {
            instances.push(current.finish());
            current = InstanceBuilder::new();
        }
        if total <= cap {
            current.open_dialogue(&dialogue.id);
            for sentence in &sentences {
                current.push_sentence(sentence, None);
            }
            continue;
        }
        // Dialogue longer than the cap on its own: truncate at the last
        // utterance boundary that fits (tail-truncating a lone oversized
        // first utterance), then close the instance.
        current.open_dialogue(&dialogue.id);
        let mut used = 0usize;
        for (idx, sentence) in sentences.iter().enumerate() {
            if used + sentence.ids.len() <= cap {
                current.push_sentence(sentence, None);
                used += sentence.ids.len();
            } else {
                if idx == 0 {
                    current.push_sentence(sentence, Some(cap));
                }
                break;
            }
        }
        instances.push(current.finish());
        current = InstanceBuilder::new();
    }
    if !current.is_empty() {
        instances.push(current.finish());
    }
    Ok(instances)
}

/// Builds the three stage-2 corpus variants.
///
/// `short` holds one per-dialogue instance truncated at `cap_long`; `long`
/// packs the corpus to `cap_long`; `both` concatenates `short` then `long`.
/// Every dialogue must carry turn info.
pub fn build_s2_variants(
    dialogues: &[Dialogue],
    cap_long: usize,
    vocab: &Vocab,
) -> Result<S2Variants, ObjectiveError> {
    for dialogue in dialogues {
        if !dialogue.has_turn_info {
            return Err(ObjectiveError::TurnInfoRequired(dialogue.id.clone()));
        }
    }
    let mut short = Vec::with_capacity(dialogues.len());
    for dialogue in dialogues {
        let mut packed = pack(std::slice::from_ref(dialogue), cap_long, vocab)?;
        // A single dialogue always yields exactly one (possibly truncated)
        // instance.
        debug_assert_eq!(packed.len(), 1);
        short.push(packed.remove(0));
    }
    let long = pack(dialogues, cap_long, vocab)?;
    let mut both = short.clone();
    both.extend(long.iter().cloned());
    Ok(S2Variants { short, long, both })
}

/// Ground-truth turn-switch label per sentence: `true` iff the sentence is
/// the first of its instance, its speaker differs from the previous
/// sentence's, or the previous sentence belongs to a different origin
/// dialogue (a packing boundary is semantically a speaker change).
pub fn turn_labels(instance: &PackedInstance) -> Vec<bool> {
    (0..instance.sentence_speakers.len())
        .map(|i| {
            i == 0
                || instance.sentence_speakers[i] != instance.sentence_speakers[i - 1]
                || instance.sentence_origins[i] != instance.sentence_origins[i - 1]
        })
        .collect()
}

impl PackedInstance {
    /// Half-open token span `(start, end)` of each sentence, excluding any
    /// trailing dialogue separator.
    pub fn sentence_spans(&self) -> Vec<(usize, usize)> {
        let n = self.sentence_starts.len();
        (0..n)
            .map(|i| {
                let start = self.sentence_starts[i];
                let end = if i + 1 < n {
                    let next = self.sentence_starts[i + 1];
                    // A SEP immediately before the next sentence belongs to
                    // neither sentence.
                    if self.token_ids[next - 1] == SEP {
                        next - 1
                    } else {
                        next
                    }
                } else {
                    self.token_ids.len()
                };
                (start, end)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, LengthProfile, Utterance};
    use crate::tokenizer::{build_vocab, UNK};
    use proptest::prelude::*;

    /// Builds a turn-info dialogue whose rendering is exactly
    /// `utts * (words + 2)` tokens (BOS + tag + words per utterance).
    fn sized_dialogue(id: &str, utts: usize, words: usize) -> Dialogue {
        Dialogue {
            id: id.into(),
            source: "t".into(),
            has_turn_info: true,
            utterances: (0..utts)
                .map(|u| Utterance {
                    speaker: format!("spk{}", u % 2),
                    text: (0..words).map(|w| format!("w{w}")).collect::<Vec<_>>().join(" "),
                })
                .collect(),
        }
    }

    fn vocab_for(dialogues: &[Dialogue]) -> Vocab {
        build_vocab(dialogues, 4096).unwrap()
    }

    #[test]
    fn render_prepends_bos_and_speaker_tag() {
        let d = sized_dialogue("d1", 1, 3);
        let vocab = vocab_for(std::slice::from_ref(&d));
        let sentences = render_dialogue(&vocab, &d);
        assert_eq!(sentences.len(), 1);
        assert_eq!(sentences[0].ids.len(), 5);
        assert_eq!(sentences[0].ids[0], BOS);
        assert_eq!(sentences[0].ids[1], vocab.token_id("spk0").unwrap());
        assert!(sentences[0].ids[2..].iter().all(|&id| id >= 7));
    }

    #[test]
    fn render_skips_tag_for_unknown_speaker() {
        let d = Dialogue {
            id: "d1".into(),
            source: "t".into(),
            has_turn_info: false,
            utterances: vec![Utterance {
                speaker: UNK_SPEAKER.into(),
                text: "a b".into(),
            }],
        };
        let vocab = vocab_for(std::slice::from_ref(&d));
        let sentences = render_dialogue(&vocab, &d);
        assert_eq!(sentences[0].ids.len(), 3); // BOS + 2 words, no tag
    }

    #[test]
    fn render_tracks_source_capitalization() {
        let d = Dialogue {
            id: "d1".into(),
            source: "t".into(),
            has_turn_info: true,
            utterances: vec![Utterance {
                speaker: "A".into(),
                text: "Kim07 said hello".into(),
            }],
        };
        let vocab = vocab_for(std::slice::from_ref(&d));
        let s = &render_dialogue(&vocab, &d)[0];
        assert_eq!(s.capitalized, vec![false, false, true, false, false]);
    }

    #[test]
    fn render_maps_oov_words_to_unk() {
        let d = sized_dialogue("d1", 1, 2);
        let vocab = build_vocab(&[], 8).unwrap(); // empty vocabulary
        let s = &render_dialogue(&vocab, &d)[0];
        assert_eq!(s.ids, vec![BOS, UNK, UNK, UNK]); // tag also OOV
    }

    #[test]
    fn pack_greedy_hand_example() {
        // Rendered lengths 1000, 800, 500 with cap 1400 and SEP cost 1:
        // 1000 + 1 + 800 > 1400 so d1 closes; 800 + 1 + 500 <= 1400.
        let d1 = sized_dialogue("d1", 100, 8);
        let d2 = sized_dialogue("d2", 80, 8);
        let d3 = sized_dialogue("d3", 50, 8);
        let all = vec![d1, d2, d3];
        let vocab = vocab_for(&all);
        let packed = pack(&all, 1400, &vocab).unwrap();
        assert_eq!(packed.len(), 2);
        assert_eq!(packed[0].token_ids.len(), 1000);
        assert_eq!(packed[0].origin_ids, vec!["d1"]);
        assert_eq!(packed[1].token_ids.len(), 800 + 1 + 500);
        assert_eq!(packed[1].origin_ids, vec!["d2", "d3"]);
        // SEP sits exactly between the two dialogues.
        assert_eq!(packed[1].token_ids[800], SEP);
    }

    #[test]
    fn pack_single_small_dialogue() {
        let d = sized_dialogue("d1", 1, 8);
        let vocab = vocab_for(std::slice::from_ref(&d));
        let packed = pack(std::slice::from_ref(&d), 4096, &vocab).unwrap();
        assert_eq!(packed.len(), 1);
        assert_eq!(packed[0].token_ids.len(), 10);
    }

    #[test]
    fn pack_truncates_oversized_dialogue_at_utterance_boundary() {
        // 3 utterances x 10 tokens, cap 25: two utterances fit (20), the
        // third would reach 30, so the tail is dropped.
        let d = sized_dialogue("d1", 3, 8);
        let vocab = vocab_for(std::slice::from_ref(&d));
        let packed = pack(std::slice::from_ref(&d), 25, &vocab).unwrap();
        assert_eq!(packed.len(), 1);
        assert_eq!(packed[0].token_ids.len(), 20);
        assert_eq!(packed[0].sentence_starts, vec![0, 10]);
    }

    #[test]
    fn pack_tail_truncates_giant_first_utterance() {
        let d = sized_dialogue("d1", 1, 30); // 32 tokens
        let vocab = vocab_for(std::slice::from_ref(&d));
        let packed = pack(std::slice::from_ref(&d), 16, &vocab).unwrap();
        assert_eq!(packed.len(), 1);
        assert_eq!(packed[0].token_ids.len(), 16);
        assert_eq!(packed[0].sentence_starts, vec![0]);
        assert_eq!(packed[0].token_ids[0], BOS);
    }

    #[test]
    fn pack_rejects_tiny_cap() {
        let d = sized_dialogue("d1", 1, 2);
        let vocab = vocab_for(std::slice::from_ref(&d));
        assert!(matches!(
            pack(std::slice::from_ref(&d), 8, &vocab),
            Err(ObjectiveError::CapTooSmall(8))
        ));
    }

    #[test]
    fn s2_variants_shapes() {
        // Three dialogues of 100 tokens each: short = 3 instances, long
        // packs all three into one instance of 302 tokens (two SEPs).
        let dialogues: Vec<Dialogue> = (0..3)
            .map(|i| sized_dialogue(&format!("d{i}"), 10, 8))
            .collect();
        let vocab = vocab_for(&dialogues);
        let variants = build_s2_variants(&dialogues, 1400, &vocab).unwrap();
        assert_eq!(variants.short.len(), 3);
        assert!(variants.short.iter().all(|i| i.token_ids.len() == 100));
        assert_eq!(variants.long.len(), 1);
        assert_eq!(variants.long[0].token_ids.len(), 302);
        assert_eq!(variants.both.len(), variants.short.len() + variants.long.len());
    }

    #[test]
    fn s2_short_truncates_long_dialogues() {
        let d = sized_dialogue("d1", 200, 8); // 2000 tokens
        let vocab = vocab_for(std::slice::from_ref(&d));
        let variants = build_s2_variants(std::slice::from_ref(&d), 1400, &vocab).unwrap();
        assert_eq!(variants.short.len(), 1);
        assert!(variants.short[0].token_ids.len() <= 1400);
        assert_eq!(variants.short[0].token_ids.len(), 1400); // 140 whole utterances
    }

    #[test]
    fn s2_variants_require_turn_info() {
        let d = Dialogue {
            id: "d1".into(),
            source: "t".into(),
            has_turn_info: false,
            utterances: vec![Utterance {
                speaker: UNK_SPEAKER.into(),
                text: "a".into(),
            }],
        };
        assert!(matches!(
            build_s2_variants(std::slice::from_ref(&d), 1400, &vocab_for(&[])),
            Err(ObjectiveError::TurnInfoRequired(_))
        ));
    }

    fn instance_with_speakers(speakers: &[&str], origins: &[usize]) -> PackedInstance {
        let n = speakers.len();
        PackedInstance {
            token_ids: (0..n).flat_map(|_| [BOS, 7]).collect(),
            sentence_starts: (0..n).map(|i| 2 * i).collect(),
            sentence_speakers: speakers.iter().map(|s| s.to_string()).collect(),
            sentence_origins: origins.to_vec(),
            origin_ids: vec!["d".into(); origins.iter().max().map_or(0, |m| m + 1)],
            capitalized: vec![false; 2 * n],
        }
    }

    #[test]
    fn turn_labels_follow_speaker_changes() {
        let inst = instance_with_speakers(&["A", "A", "B", "A"], &[0, 0, 0, 0]);
        assert_eq!(turn_labels(&inst), vec![true, false, true, true]);
        let inst = instance_with_speakers(&["A", "A", "A"], &[0, 0, 0]);
        assert_eq!(turn_labels(&inst), vec![true, false, false]);
    }

    #[test]
    fn turn_labels_mark_dialogue_boundaries() {
        // Two packed dialogues [A, A] + [A]: boundary forces a switch.
        let inst = instance_with_speakers(&["A", "A", "A"], &[0, 0, 1]);
        assert_eq!(turn_labels(&inst), vec![true, false, true]);
    }

    #[test]
    fn turn_labels_invariant_under_speaker_renaming() {
        let inst = instance_with_speakers(&["A", "B", "B", "C"], &[0, 0, 0, 0]);
        let renamed = instance_with_speakers(&["x9", "q", "q", "zz"], &[0, 0, 0, 0]);
        assert_eq!(turn_labels(&inst), turn_labels(&renamed));
    }

    #[test]
    fn sentence_spans_skip_separators() {
        let d1 = sized_dialogue("d1", 2, 3);
        let d2 = sized_dialogue("d2", 1, 3);
        let all = vec![d1, d2];
        let vocab = vocab_for(&all);
        let packed = pack(&all, 64, &vocab).unwrap();
        assert_eq!(packed.len(), 1);
        let inst = &packed[0];
        let spans = inst.sentence_spans();
        assert_eq!(spans, vec![(0, 5), (5, 10), (11, 16)]);
        assert_eq!(inst.token_ids[10], SEP);
        for (i, &(s, _)) in spans.iter().enumerate() {
            assert_eq!(inst.token_ids[s], BOS);
            assert_eq!(s, inst.sentence_starts[i]);
        }
    }

    fn small_profile() -> LengthProfile {
        LengthProfile {
            min_utterances: 1,
            max_utterances: 5,
            min_words: 2,
            max_words: 6,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn packing_respects_cap_and_marker_invariants(
            n in 1usize..20,
            seed in 0u64..1000,
            cap in 32usize..256,
        ) {
            let corpus = synth_corpus(n, true, small_profile(), 4, seed).unwrap();
            let vocab = build_vocab(&corpus, 2048).unwrap();
            let packed = pack(&corpus, cap, &vocab).unwrap();
            for inst in &packed {
                prop_assert!(inst.token_ids.len() <= cap);
                prop_assert_eq!(inst.sentence_starts.len(), inst.sentence_speakers.len());
                prop_assert_eq!(inst.sentence_starts.len(), inst.sentence_origins.len());
                prop_assert_eq!(inst.token_ids.len(), inst.capitalized.len());
                for w in inst.sentence_starts.windows(2) {
                    prop_assert!(w[0] < w[1]);
                }
                for &s in &inst.sentence_starts {
                    prop_assert_eq!(inst.token_ids[s], BOS);
                }
            }
        }

        #[test]
        fn packing_preserves_content_when_nothing_truncates(
            n in 1usize..15,
            seed in 0u64..1000,
        ) {
            let corpus = synth_corpus(n, true, small_profile(), 3, seed).unwrap();
            let vocab = build_vocab(&corpus, 2048).unwrap();
            // Generous cap: no dialogue is ever truncated.
            let packed = pack(&corpus, 4096, &vocab).unwrap();
            let stream: Vec<u32> = packed
                .iter()
                .flat_map(|i| i.token_ids.iter().copied())
                .filter(|&t| t != SEP)
                .collect();
            let expected: Vec<u32> = corpus
                .iter()
                .flat_map(|d| render_dialogue(&vocab, d))
                .flat_map(|s| s.ids)
                .collect();
            prop_assert_eq!(stream, expected);
        }

        #[test]
        fn turn_labels_nondegenerate_on_synth(seed in 0u64..200) {
            let corpus = synth_corpus(6, true, small_profile(), 4, seed).unwrap();
            let vocab = build_vocab(&corpus, 2048).unwrap();
            let packed = pack(&corpus, 256, &vocab).unwrap();
            let labels: Vec<bool> = packed.iter().flat_map(turn_labels).collect();
            prop_assert!(labels[0]);
        }
    }
}
