//! Loss functions and the joint per-example forward/backward pass.
//!
//! The joint objective is `L = L_gen + beta * L_turn + L_mlm`, where each
//! component is present only when its inputs exist and its flag is on:
//! generation loss over the decoder target, turn-switch BCE at sentence
//! starts, and masked-word classification at masked encoder positions.

use ndarray::{Array1, Array2};

use super::TrainError;
use crate::model::{
    decode_with_cache, decoder_backward, encode_with_cache, encoder_backward, mlm_backward,
    mlm_logits, turn_head, Gradients, Parameters,
};
use crate::objectives::PretrainExample;
use crate::tokenizer::{BOS, PAD};
use crate::Scalar;

/// Probability clamp inside the turn-switch BCE.
pub const BCE_EPS: f64 = 1e-12;

/// Token-mean cross-entropy of `logits` against `targets`; `PAD` targets
/// are ignored. Returns the loss and `d(loss)/d(logits)`.
fn cross_entropy<F: Scalar>(
    logits: &Array2<F>,
    targets: &[u32],
) -> Result<(f64, Array2<F>), TrainError> {
    if logits.nrows() != targets.len() {
        return Err(TrainError::Mismatch(format!(
            "{} logit rows for {} target tokens",
            logits.nrows(),
            targets.len()
        )));
    }
    let n_live = targets.iter().filter(|&&t| t != PAD).count();
    let mut d_logits = Array2::zeros(logits.raw_dim());
    if n_live == 0 {
        return Ok((0.0, d_logits));
    }
    let inv_n = F::from_f64_c(1.0 / n_live as f64);
    let mut loss = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        if target == PAD {
            continue;
        }
        let row = logits.row(i);
        if target as usize >= row.len() {
            return Err(TrainError::Mismatch(format!(
                "target id {target} outside vocabulary of {}",
                row.len()
            )));
        }
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum_exp: F = row.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += (lse - row[target as usize]).to_f64_c();
        for (j, &l) in row.iter().enumerate() {
            let softmax = (l - lse).exp();
            let onehot = if j == target as usize { F::one() } else { F::zero() };
            d_logits[(i, j)] = (softmax - onehot) * inv_n;
        }
    }
    Ok((loss / n_live as f64, d_logits))
}

/// Token-mean generation loss over non-`PAD` targets (public scoring
/// entry point; uniform logits over a vocabulary of `V` give `ln V`).
pub fn generation_loss<F: Scalar>(
    logits: &Array2<F>,
    targets: &[u32],
) -> Result<f64, TrainError> {
    cross_entropy(logits, targets).map(|(loss, _)| loss)
}

/// Mean binary cross-entropy of sigmoid `scores` against boolean `labels`,
/// with scores clamped to `[BCE_EPS, 1 - BCE_EPS]` before the logs.
/// Returns the loss and `d(loss)/d(z)` per pre-sigmoid logit — zero where
/// the clamp is active, matching the derivative of the clamped loss.
fn bce<F: Scalar>(scores: &[F], labels: &[bool]) -> Result<(f64, Vec<F>), TrainError> {
    if scores.len() != labels.len() {
        return Err(TrainError::Mismatch(format!(
            "{} turn scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(TrainError::Mismatch("no sentences to score".into()));
    }
    let eps = F::from_f64_c(BCE_EPS);
    let one = F::one();
    let inv_n = F::from_f64_c(1.0 / scores.len() as f64);
    let mut loss = F::zero();
    let mut dz = Vec::with_capacity(scores.len());
    for (&score, &label) in scores.iter().zip(labels) {
        let clamped = score.max(eps).min(one - eps);
        let y = if label { one } else { F::zero() };
        loss -= y * clamped.ln() + (one - y) * (one - clamped).ln();
        if score > eps && score < one - eps {
            dz.push((score - y) * inv_n);
        } else {
            dz.push(F::zero());
        }
    }
    Ok(((loss * inv_n).to_f64_c(), dz))
}

/// Mean turn-switch BCE (public scoring entry point; scores of 0.5
/// everywhere give `ln 2`).
pub fn turn_loss<F: Scalar>(scores: &[F], labels: &[bool]) -> Result<f64, TrainError> {
    bce(scores, labels).map(|(loss, _)| loss)
}

/// Which optional loss components a stage trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub turn: bool,
    pub mlm: bool,
}

/// Per-example loss components; `None` when a component was not computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub gen: Option<f64>,
    pub turn: Option<f64>,
    pub mlm: Option<f64>,
}

impl LossParts {
    /// The scalar actually optimized: `gen + beta * turn + mlm`.
    pub fn total(&self, beta: f64) -> f64 {
        self.gen.unwrap_or(0.0) + beta * self.turn.unwrap_or(0.0) + self.mlm.unwrap_or(0.0)
    }
}

/// Joint forward (and optional backward) pass for one example.
///
/// Generation loss runs whenever the example has a target; the turn and
/// masked-word components obey `flags` (the latter also requires masked
/// positions). With `with_grads`, the returned gradients are the exact
/// derivatives of [`LossParts::total`] at `beta`.
pub fn example_losses<F: Scalar>(
    params: &Parameters<F>,
    example: &PretrainExample,
    flags: LossFlags,
    beta: f64,
    with_grads: bool,
) -> Result<(LossParts, Option<Gradients<F>>), TrainError> {
    let (enc_out, enc_cache) = encode_with_cache(params, &example.encoder_ids)?;
    let mut grads = with_grads.then(|| Gradients::zeros_like(params));
    let mut d_hidden: Array2<F> = Array2::zeros(enc_out.hidden.raw_dim());

    // Generation path: teacher-forced decode of the target.
    let gen = if example.target_ids.is_empty() {
        None
    } else {
        let mut input = Vec::with_capacity(example.target_ids.len());
        input.push(BOS);
        input.extend_from_slice(&example.target_ids[..example.target_ids.len() - 1]);
        let (logits, dec_cache) = decode_with_cache(params, &enc_out, &input)?;
        let (loss, d_logits) = cross_entropy(&logits, &example.target_ids)?;
        if let Some(grads) = grads.as_mut() {
            let d_memory = decoder_backward(params, &dec_cache, &d_logits, grads);
            d_hidden += &d_memory;
        }
        Some(loss)
    };

    // Turn-switch path: sigmoid head over sentence-start states.
    let turn = if flags.turn {
        let scores = turn_head(params, &enc_out.hidden, &example.sentence_starts)?;
        let (loss, dz) = bce(&scores, &example.turn_labels)?;
        if let Some(grads) = grads.as_mut() {
            let w = params.view1("turn.w").to_owned();
            let beta_f = F::from_f64_c(beta);
            let mut dw = Array1::zeros(w.len());
            let mut db = F::zero();
            for (i, &start) in example.sentence_starts.iter().enumerate() {
                let scaled = beta_f * dz[i];
                let mut row = d_hidden.row_mut(start);
                row.scaled_add(scaled, &w);
                dw.scaled_add(scaled, &enc_out.hidden.row(start));
                db += scaled;
            }
            grads.add1("turn.w", &dw);
            grads.add1("turn.b", &Array1::from_elem(1, db));
        }
        Some(loss)
    } else {
        None
    };

    // Masked-word classification path through the tied embedding.
    let mlm = if flags.mlm && !example.masked_word_positions.is_empty() {
        let logits = mlm_logits(params, &enc_out.hidden, &example.masked_word_positions)?;
        let (loss, d_logits) = cross_entropy(&logits, &example.masked_word_originals)?;
        if let Some(grads) = grads.as_mut() {
            let d_from_mlm = mlm_backward(
                params,
                &enc_out.hidden,
                &example.masked_word_positions,
                &d_logits,
                grads,
            );
            d_hidden += &d_from_mlm;
        }
        Some(loss)
    } else {
        None
    };

    if let Some(grads) = grads.as_mut() {
        encoder_backward(params, &enc_cache, &d_hidden, grads);
    }
    Ok((LossParts { gen, turn, mlm }, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dialogue, Utterance};
    use crate::model::ModelConfig;
    use crate::objectives::{mask_sentences, pack};
    use crate::tokenizer::build_vocab;

    fn tiny_params(vocab_size: usize) -> Parameters<f64> {
        Parameters::init(
            ModelConfig {
                vocab_size,
                d_model: 8,
                n_heads: 2,
                n_enc_layers: 1,
                n_dec_layers: 1,
                d_ff: 16,
                window: 5,
                max_positions_enc: 64,
                max_positions_dec: 32,
                dropout_rate: 0.0,
            },
            13,
        )
        .unwrap()
    }

    fn sample_example() -> (PretrainExample, usize) {
        let d = Dialogue {
            id: "d1".into(),
            source: "t".into(),
            has_turn_info: true,
            utterances: [("a", "one two three"), ("b", "four five"), ("a", "six seven")]
                .iter()
                .map(|(s, t)| Utterance {
                    speaker: s.to_string(),
                    text: t.to_string(),
                })
                .collect(),
        };
        let vocab = build_vocab(std::slice::from_ref(&d), 64).unwrap();
        let inst = pack(std::slice::from_ref(&d), 64, &vocab).unwrap().remove(0);
        (mask_sentences(&inst, 0.34, 3).unwrap(), vocab.size())
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Array2::<f64>::zeros((3, 50));
        let loss = generation_loss(&logits, &[7, 8, 9]).unwrap();
        assert!((loss - 50.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pad_targets_are_ignored() {
        let mut logits = Array2::<f64>::zeros((3, 10));
        logits[(1, 4)] = 100.0; // the PAD row's content must not matter
        let with_pad = generation_loss(&logits, &[7, PAD, 9]).unwrap();
        let reference =
            generation_loss(&Array2::<f64>::zeros((2, 10)), &[7, 9]).unwrap();
        assert!((with_pad - reference).abs() < 1e-12);
    }

    #[test]
    fn indifferent_scores_give_ln_two() {
        let loss = turn_loss(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_scores_match_hand_value() {
        // -(ln 0.9 + ln 0.8) / 2
        let loss = turn_loss(&[0.9, 0.8], &[true, true]).unwrap();
        assert!((loss - 0.164252033486018).abs() < 1e-9);
    }

    #[test]
    fn clamp_keeps_extreme_scores_finite() {
        let loss = turn_loss(&[0.0, 1.0], &[true, false]).unwrap();
        assert!(loss.is_finite());
        // Both scores hit the clamp: loss = -ln(eps) per element.
        assert!((loss - (-BCE_EPS.ln())).abs() < 1e-3);
    }

    #[test]
    fn turn_loss_rejects_mismatched_lengths() {
        assert!(turn_loss(&[0.5], &[true, false]).is_err());
    }

    #[test]
    fn joint_losses_and_grads_are_finite() {
        let (example, vocab_size) = sample_example();
        let params = tiny_params(vocab_size);
        let flags = LossFlags { turn: true, mlm: false };
        let (parts, grads) = example_losses(&params, &example, flags, 3.0, true).unwrap();
        assert!(parts.gen.unwrap().is_finite());
        assert!(parts.turn.unwrap().is_finite());
        assert!(parts.mlm.is_none());
        assert!(grads.unwrap().all_finite());
    }

    #[test]
    fn turn_only_loss_leaves_decoder_untouched() {
        let (mut example, vocab_size) = sample_example();
        example.target_ids.clear(); // no generation component
        let params = tiny_params(vocab_size);
        let flags = LossFlags { turn: true, mlm: false };
        let (parts, grads) = example_losses(&params, &example, flags, 1.0, true).unwrap();
        let grads = grads.unwrap();
        assert!(parts.gen.is_none());
        assert!(parts.turn.is_some());
        for (name, tensor) in grads.tensors() {
            let touched = tensor.iter().any(|&v| v != 0.0);
            if name.starts_with("dec.") || name == "embed.pos_dec" {
                assert!(!touched, "{name} received gradient without a generation loss");
            }
        }
        // The turn head itself must receive gradient.
        assert!(grads.get("turn.w").unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn beta_scales_turn_gradient_linearly() {
        let (example, vocab_size) = sample_example();
        let params = tiny_params(vocab_size);
        let flags = LossFlags { turn: true, mlm: false };
        let (_, g1) = example_losses(&params, &example, flags, 1.0, true).unwrap();
        let (_, g3) = example_losses(&params, &example, flags, 3.0, true).unwrap();
        let g1 = g1.unwrap();
        let g3 = g3.unwrap();
        let w1 = g1.get("turn.w").unwrap();
        let w3 = g3.get("turn.w").unwrap();
        for (a, b) in w1.iter().zip(w3.iter()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }
}
