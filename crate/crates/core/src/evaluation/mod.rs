//! Held-out evaluation: greedy generation scored with overlap metrics plus
//! pooled turn-switch classification quality.

mod decode;
mod rouge;

pub use decode::{argmax_lowest, greedy_decode};
pub use rouge::{corpus_rouge, rouge_g, rouge_l, rouge_n, RougeReport, RougeScore};

use thiserror::Error;

use crate::model::{encode_with_cache, turn_head, ModelError, Parameters};
use crate::objectives::{reconstruct_unmasked, ObjectiveError, PretrainExample};
use crate::tokenizer::{TokenizerError, Vocab};
use crate::Scalar;

/// Default decision threshold for turn-switch scores.
pub const TURN_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("evaluation requires at least one example")]
    EmptySplit,
    #[error("{0}")]
    Mismatch(String),
}

/// Pooled binary-classification quality of turn-switch scores. Zero
/// denominators (no predicted or no actual positives) yield 0, not NaN.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TurnMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores pooled predictions `score > threshold` against boolean labels.
pub fn turn_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<TurnMetrics, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Mismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&score, &label) in scores.iter().zip(labels) {
        let pred = score > threshold;
        match (pred, label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(TurnMetrics { precision, recall, f1 })
}

/// One decoded example: surface strings plus per-pair F1 scores on the
/// 0-100 scale (matching [`RougeReport`]).
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ExampleEval {
    pub candidate: String,
    pub reference: String,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

/// Full evaluation result over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub per_example: Vec<ExampleEval>,
    pub rouge: RougeReport,
    pub turn: TurnMetrics,
}

/// Greedy-decodes every example against its target and pools turn-switch
/// scores over the split.
///
/// Candidates and references detokenize symmetrically (special tokens render
/// literally). Turn scores come from re-encoding each example's reconstructed
/// unmasked stream and reading the switch head at sentence starts; examples
/// with an empty target still contribute turn scores but no text pair.
pub fn evaluate_split<F: Scalar>(
    params: &Parameters<F>,
    vocab: &Vocab,
    examples: &[PretrainExample],
    max_decode_len: usize,
    threshold: f64,
) -> Result<EvalOutcome, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut per_example = Vec::with_capacity(examples.len());
    let mut pairs = Vec::with_capacity(examples.len());
    let mut all_scores: Vec<f64> = Vec::new();
    let mut all_labels: Vec<bool> = Vec::new();

    for example in examples {
        if !example.target_ids.is_empty() {
            let decoded = greedy_decode(params, &example.encoder_ids, max_decode_len)?;
            let candidate = vocab.decode(&decoded)?;
            let reference = vocab.decode(&example.target_ids)?;
            per_example.push(ExampleEval {
                r1: 100.0 * rouge_n(&candidate, &reference, 1).f1,
                r2: 100.0 * rouge_n(&candidate, &reference, 2).f1,
                rl: 100.0 * rouge_l(&candidate, &reference).f1,
                candidate: candidate.clone(),
                reference: reference.clone(),
            });
            pairs.push((candidate, reference));
        }

        let (unmasked_ids, starts) = reconstruct_unmasked(example)?;
        let (encoded, _) = encode_with_cache(params, &unmasked_ids)?;
        let scores = turn_head(params, &encoded.hidden, &starts)?;
        if scores.len() != example.turn_labels.len() {
            return Err(EvalError::Mismatch(format!(
                "{} turn scores vs {} labels",
                scores.len(),
                example.turn_labels.len()
            )));
        }
        all_scores.extend(scores.iter().map(|s| s.to_f64_c()));
        all_labels.extend_from_slice(&example.turn_labels);
    }

    let rouge = corpus_rouge(&pairs);
    let turn = turn_metrics(&all_scores, &all_labels, threshold)?;
    Ok(EvalOutcome { per_example, rouge, turn })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, LengthProfile};
    use crate::model::ModelConfig;
    use crate::objectives::{mask_sentences, pack};
    use crate::tokenizer::build_vocab;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn turn_metrics_hand_case() {
        // preds (threshold 0.5): [T, F, T]; labels [T, F, F]
        // -> tp=1 fp=1 fn=0 -> p=0.5 r=1 f1=2/3.
        let m = turn_metrics(&[0.9, 0.2, 0.7], &[true, false, false], 0.5).unwrap();
        close(m.precision, 0.5);
        close(m.recall, 1.0);
        close(m.f1, 2.0 / 3.0);
    }

    #[test]
    fn turn_metrics_zero_denominators_yield_zero() {
        // No predicted positives.
        let m = turn_metrics(&[0.1, 0.2], &[true, false], 0.5).unwrap();
        close(m.precision, 0.0);
        close(m.recall, 0.0);
        close(m.f1, 0.0);
        // No actual positives.
        let m = turn_metrics(&[0.9, 0.8], &[false, false], 0.5).unwrap();
        close(m.recall, 0.0);
        close(m.f1, 0.0);
    }

    #[test]
    fn turn_metrics_threshold_is_strict() {
        let m = turn_metrics(&[0.5], &[true], 0.5).unwrap();
        close(m.recall, 0.0);
    }

    #[test]
    fn turn_metrics_rejects_length_mismatch() {
        assert!(matches!(
            turn_metrics(&[0.5, 0.5], &[true], 0.5),
            Err(EvalError::Mismatch(_))
        ));
    }

    #[test]
    fn split_evaluation_produces_consistent_report() {
        let profile = LengthProfile {
            min_utterances: 3,
            max_utterances: 6,
            min_words: 2,
            max_words: 6,
        };
        let dialogues = synth_corpus(4, true, profile, 3, 41).unwrap();
        let vocab = build_vocab(&dialogues, 600).unwrap();
        let examples: Vec<_> = dialogues
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let instance = pack(std::slice::from_ref(d), 96, &vocab).unwrap().remove(0);
                mask_sentences(&instance, 0.18, 100 + i as u64).unwrap()
            })
            .collect();
        let config = ModelConfig {
            vocab_size: vocab.size(),
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            window: 5,
            max_positions_enc: 128,
            max_positions_dec: 64,
            dropout_rate: 0.0,
        };
        let params = Parameters::<f64>::init(config, 9).unwrap();
        let outcome = evaluate_split(&params, &vocab, &examples, 20, TURN_THRESHOLD).unwrap();

        assert_eq!(outcome.per_example.len(), examples.len());
        for row in &outcome.per_example {
            assert!(!row.reference.is_empty());
            assert!((0.0..=100.0).contains(&row.r1));
            assert!((0.0..=100.0).contains(&row.r2));
            assert!((0.0..=100.0).contains(&row.rl));
        }
        for v in [outcome.rouge.r1, outcome.rouge.r2, outcome.rouge.rl, outcome.rouge.rg] {
            assert!((0.0..=100.0).contains(&v));
        }
        let cube = outcome.rouge.rg.powi(3);
        assert!((cube - outcome.rouge.r1 * outcome.rouge.r2 * outcome.rouge.rl).abs() < 1e-6);
        for v in [outcome.turn.precision, outcome.turn.recall, outcome.turn.f1] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn split_evaluation_rejects_empty_input() {
        let config = ModelConfig {
            vocab_size: 40,
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            window: 5,
            max_positions_enc: 32,
            max_positions_dec: 16,
            dropout_rate: 0.0,
        };
        let params = Parameters::<f64>::init(config, 1).unwrap();
        let vocab = build_vocab(&[], 40).unwrap();
        assert!(matches!(
            evaluate_split(&params, &vocab, &[], 8, 0.5),
            Err(EvalError::EmptySplit)
        ));
    }

    #[test]
    fn perfect_candidates_score_one_hundred() {
        // Feed identical candidate/reference pairs through the corpus path.
        let pairs = vec![
            ("kim00 walked home".to_string(), "kim00 walked home".to_string()),
            ("they stop now".to_string(), "they stop now".to_string()),
        ];
        let report = corpus_rouge(&pairs);
        close(report.r1, 100.0);
        close(report.r2, 100.0);
        close(report.rl, 100.0);
        close(report.rg, 100.0);
    }
}
