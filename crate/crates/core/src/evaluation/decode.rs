//! Greedy autoregressive decoding.

use ndarray::ArrayView1;

use crate::model::{decode_with_cache, encode_with_cache, ModelError, Parameters};
use crate::tokenizer::{BOS, EOS, PAD};
use crate::Scalar;

/// Index of the largest value in `row`, skipping `banned` ids; exact ties
/// resolve to the lowest id. `banned` must leave at least one entry eligible.
pub fn argmax_lowest<F: Scalar>(row: ArrayView1<F>, banned: &[u32]) -> u32 {
    let mut best: Option<(u32, F)> = None;
    for (i, &v) in row.iter().enumerate() {
        let id = i as u32;
        if banned.contains(&id) {
            continue;
        }
        let improves = match best {
            None => true,
            Some((_, best_v)) => v > best_v,
        };
        if improves {
            best = Some((id, v));
        }
    }
    best.expect("argmax over a row with every id banned").0
}

/// Decodes greedily from a fresh `BOS`, re-running the decoder over the
/// growing prefix each step. `PAD` and `BOS` logits are never selected, so
/// the output contains neither; decoding stops after emitting [`EOS`], or
/// once `max_len` tokens (or the decoder position table) are exhausted.
pub fn greedy_decode<F: Scalar>(
    params: &Parameters<F>,
    encoder_ids: &[u32],
    max_len: usize,
) -> Result<Vec<u32>, ModelError> {
    let (memory, _) = encode_with_cache(params, encoder_ids)?;
    let mut out: Vec<u32> = Vec::new();
    let mut input: Vec<u32> = vec![BOS];
    while out.len() < max_len && input.len() <= params.config().max_positions_dec {
        let (logits, _) = decode_with_cache(params, &memory, &input)?;
        let next = argmax_lowest(logits.row(logits.nrows() - 1), &[PAD, BOS]);
        out.push(next);
        if next == EOS {
            break;
        }
        input.push(next);
    }
    Ok(out)
}
