//! Deterministic word-level tokenizer with a fixed special-token set.
//!
//! Ordinary tokens are lowercased whitespace words ranked by frequency;
//! ids 0..=6 are reserved specials present in every vocabulary. Raw text can
//! never encode to a special id: special strings typed as text fall back to
//! [`UNK`].

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::{Dialogue, UNK_SPEAKER};

/// Padding (dropped on decode).
pub const PAD: u32 = 0;
/// Sentence-start marker prepended to every rendered sentence.
pub const BOS: u32 = 1;
/// End-of-sequence marker terminating decoder targets.
pub const EOS: u32 = 2;
/// Replacement token for a masked sentence.
pub const UTT_MASK: u32 = 3;
/// Replacement token for a masked word.
pub const WORD_MASK: u32 = 4;
/// Separator between dialogues inside one packed instance.
pub const SEP: u32 = 5;
/// Fallback for out-of-vocabulary words.
pub const UNK: u32 = 6;
/// Number of reserved special ids; ordinary tokens start here.
pub const NUM_SPECIALS: u32 = 7;

/// Special token strings, indexed by id.
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS as usize] = [
    "<pad>",
    "<s>",
    "</s>",
    "<utt_mask>",
    "<word_mask>",
    "<sep>",
    "<unk>",
];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary capacity must be >= {NUM_SPECIALS} + 1, got {0}")]
    CapacityTooSmall(usize),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocabulary file line {line}: {message}")]
    BadVocabFile { line: usize, message: String },
}

/// Immutable token<->id mapping. Ids 0..=6 are always the specials; ordinary
/// tokens occupy 7..size in frequency order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    /// Ordinary tokens only; specials are unreachable from raw text.
    token_to_id: HashMap<String, u32>,
    /// Full table including specials, indexed by id.
    id_to_token: Vec<String>,
}

impl Vocab {
    fn from_ordinary_tokens(tokens: Vec<String>) -> Self {
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for token in tokens {
            let id = id_to_token.len() as u32;
            token_to_id.insert(token.clone(), id);
            id_to_token.push(token);
        }
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    /// Total vocabulary size including the seven specials.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Looks up an ordinary (non-special) token's id.
    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Returns the token string for an id, specials included.
    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Encodes raw text: lowercase, split on whitespace, map each word with
    /// [`UNK`] fallback. Never emits special ids other than `UNK`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| {
                let lower = w.to_lowercase();
                self.token_to_id.get(&lower).copied().unwrap_or(UNK)
            })
            .collect()
    }

    /// Decodes ids into a space-joined string. [`PAD`] is dropped; other
    /// specials render as their literal strings.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= self.id_to_token.len() {
                return Err(TokenizerError::IdOutOfRange {
                    id,
                    size: self.id_to_token.len(),
                });
            }
            if id == PAD {
                continue;
            }
            parts.push(self.id_to_token[id as usize].as_str());
        }
        Ok(parts.join(" "))
    }

    /// Writes the vocabulary file: one ordinary token per line, line number
    /// = id − 7 (specials are implicit).
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut writer = BufWriter::new(File::create(path)?);
        for token in &self.id_to_token[NUM_SPECIALS as usize..] {
            writer.write_all(token.as_bytes())?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Loads a vocabulary file written by [`Vocab::save`].
    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let reader = BufReader::new(File::open(path)?);
        let mut tokens = Vec::new();
        let mut seen = HashMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let token = line?;
            let line_no = idx + 1;
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(TokenizerError::BadVocabFile {
                    line: line_no,
                    message: "tokens must be nonempty and whitespace-free".into(),
                });
            }
            if SPECIAL_TOKENS.contains(&token.as_str()) {
                return Err(TokenizerError::BadVocabFile {
                    line: line_no,
                    message: format!("special token {token:?} is not an ordinary entry"),
                });
            }
            if seen.insert(token.clone(), line_no).is_some() {
                return Err(TokenizerError::BadVocabFile {
                    line: line_no,
                    message: format!("duplicate token {token:?}"),
                });
            }
            tokens.push(token);
        }
        Ok(Vocab::from_ordinary_tokens(tokens))
    }
}

/// Normalizes a speaker key into the vocabulary token used as the sentence's
/// speaker tag: lowercased, whitespace replaced by underscores.
pub fn speaker_tag(speaker: &str) -> String {
    speaker
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
}

/// Builds a vocabulary from a corpus.
///
/// Candidates are lowercased whitespace words of all utterance texts plus
/// the speaker-tag token of every attributed utterance (so rendered speaker
/// tags stay in-vocabulary). They are ranked by (frequency desc, token asc)
/// and fill ids `7..max_size`. Strings colliding with special tokens are
/// skipped.
pub fn build_vocab(corpus: &[Dialogue], max_size: usize) -> Result<Vocab, TokenizerError> {
    if max_size < NUM_SPECIALS as usize + 1 {
        return Err(TokenizerError::CapacityTooSmall(max_size));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for dialogue in corpus {
        for utt in &dialogue.utterances {
            for word in utt.text.split_whitespace() {
                *counts.entry(word.to_lowercase()).or_insert(0) += 1;
            }
            if utt.speaker != UNK_SPEAKER {
                *counts.entry(speaker_tag(&utt.speaker)).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(token, _)| !SPECIAL_TOKENS.contains(&token.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_SPECIALS as usize);
    Ok(Vocab::from_ordinary_tokens(
        ranked.into_iter().map(|(t, _)| t).collect(),
    ))
}
