//! Encoder and decoder stacks: pre-layer-norm blocks, tied-embedding output
//! logits, and explicit backward passes that accumulate into a
//! [`Gradients`] store.

use ndarray::Array2;

use super::attention::{mha_backward, mha_forward, AttnCache, AttnGrads, AttnViews, Visibility};
use super::layers::{
    ffn_backward, ffn_forward, layer_norm_backward, layer_norm_forward, FfnCache, FfnGrads,
    FfnViews, LayerNormCache,
};
use super::{Gradients, ModelError, Parameters};
use crate::tokenizer::PAD;
use crate::Scalar;

/// Final encoder states plus the padding mask downstream consumers
/// (cross-attention, turn head) must respect.
pub struct EncoderOutput<F: Scalar> {
    /// `[seq_len, d_model]` hidden states after the final layer norm.
    pub hidden: Array2<F>,
    /// True at `PAD` positions.
    pub pad: Vec<bool>,
}

struct EncBlockCache<F: Scalar> {
    ln1: LayerNormCache<F>,
    attn: AttnCache<F>,
    ln2: LayerNormCache<F>,
    ffn: FfnCache<F>,
}

/// Every activation the encoder backward pass needs.
pub struct EncoderCache<F: Scalar> {
    ids: Vec<u32>,
    blocks: Vec<EncBlockCache<F>>,
    final_ln: LayerNormCache<F>,
}

fn attn_views<'a, F: Scalar>(params: &'a Parameters<F>, prefix: &str) -> AttnViews<'a, F> {
    AttnViews {
        wq: params.view2(&format!("{prefix}.wq")),
        wk: params.view2(&format!("{prefix}.wk")),
        wv: params.view2(&format!("{prefix}.wv")),
        wo: params.view2(&format!("{prefix}.wo")),
        bq: params.view1(&format!("{prefix}.bq")),
        bv: params.view1(&format!("{prefix}.bv")),
        bo: params.view1(&format!("{prefix}.bo")),
    }
}

fn ffn_views<'a, F: Scalar>(params: &'a Parameters<F>, prefix: &str) -> FfnViews<'a, F> {
    FfnViews {
        w1: params.view2(&format!("{prefix}.w1")),
        b1: params.view1(&format!("{prefix}.b1")),
        w2: params.view2(&format!("{prefix}.w2")),
        b2: params.view1(&format!("{prefix}.b2")),
    }
}

fn add_attn_grads<F: Scalar>(grads: &mut Gradients<F>, prefix: &str, g: &AttnGrads<F>) {
    grads.add2(&format!("{prefix}.wq"), &g.dwq);
    grads.add2(&format!("{prefix}.wk"), &g.dwk);
    grads.add2(&format!("{prefix}.wv"), &g.dwv);
    grads.add2(&format!("{prefix}.wo"), &g.dwo);
    grads.add1(&format!("{prefix}.bq"), &g.dbq);
    grads.add1(&format!("{prefix}.bv"), &g.dbv);
    grads.add1(&format!("{prefix}.bo"), &g.dbo);
}

fn add_ffn_grads<F: Scalar>(grads: &mut Gradients<F>, prefix: &str, g: &FfnGrads<F>) {
    grads.add2(&format!("{prefix}.w1"), &g.dw1);
    grads.add1(&format!("{prefix}.b1"), &g.db1);
    grads.add2(&format!("{prefix}.w2"), &g.dw2);
    grads.add1(&format!("{prefix}.b2"), &g.db2);
}

fn embed<F: Scalar>(
    params: &Parameters<F>,
    ids: &[u32],
    pos_table: &str,
    max_positions: usize,
    role: &'static str,
) -> Result<Array2<F>, ModelError> {
    if ids.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if ids.len() > max_positions {
        return Err(ModelError::SequenceTooLong {
            role,
            len: ids.len(),
            max: max_positions,
        });
    }
    let vocab = params.config().vocab_size;
    let tok = params.view2("embed.tok");
    let pos = params.view2(pos_table);
    let mut x = Array2::zeros((ids.len(), params.config().d_model));
    for (p, &id) in ids.iter().enumerate() {
        if id as usize >= vocab {
            return Err(ModelError::TokenOutOfRange { id, vocab });
        }
        let row = &tok.row(id as usize) + &pos.row(p);
        x.row_mut(p).assign(&row);
    }
    Ok(x)
}

/// Runs the encoder, returning final states and the cache for
/// [`encoder_backward`]. Errors when the input is empty, all-`PAD`, too
/// long for the position table, or holds out-of-vocabulary ids.
pub fn encode_with_cache<F: Scalar>(
    params: &Parameters<F>,
    ids: &[u32],
) -> Result<(EncoderOutput<F>, EncoderCache<F>), ModelError> {
    let pad: Vec<bool> = ids.iter().map(|&t| t == PAD).collect();
    if pad.iter().all(|&p| p) {
        return Err(ModelError::EmptyInput);
    }
    let mut x = embed(
        params,
        ids,
        "embed.pos_enc",
        params.config().max_positions_enc,
        "encoder",
    )?;
    let radius = params.config().window_radius();
    let n_heads = params.config().n_heads;
    let mut blocks = Vec::with_capacity(params.config().n_enc_layers);
    for i in 0..params.config().n_enc_layers {
        let (a, ln1) = layer_norm_forward(
            &x,
            params.view1(&format!("enc.{i}.ln1.g")),
            params.view1(&format!("enc.{i}.ln1.b")),
        );
        let (s, attn) = mha_forward(
            &a,
            &a,
            &attn_views(params, &format!("enc.{i}.attn")),
            n_heads,
            Visibility::Window { radius },
            Some(&pad),
            Some(&pad),
        );
        x += &s;
        let (b, ln2) = layer_norm_forward(
            &x,
            params.view1(&format!("enc.{i}.ln2.g")),
            params.view1(&format!("enc.{i}.ln2.b")),
        );
        let (f, ffn) = ffn_forward(&b, &ffn_views(params, &format!("enc.{i}.ffn")));
        x += &f;
        blocks.push(EncBlockCache { ln1, attn, ln2, ffn });
    }
    let (hidden, final_ln) = layer_norm_forward(
        &x,
        params.view1("enc.final_ln.g"),
        params.view1("enc.final_ln.b"),
    );
    Ok((
        EncoderOutput { hidden, pad },
        EncoderCache {
            ids: ids.to_vec(),
            blocks,
            final_ln,
        },
    ))
}

/// Backpropagates `d_hidden` (gradient at the encoder's final states)
/// through the whole encoder, accumulating parameter gradients.
pub fn encoder_backward<F: Scalar>(
    params: &Parameters<F>,
    cache: &EncoderCache<F>,
    d_hidden: &Array2<F>,
    grads: &mut Gradients<F>,
) {
    let n_heads = params.config().n_heads;
    let (mut dx, dg, db) =
        layer_norm_backward(d_hidden, &cache.final_ln, params.view1("enc.final_ln.g"));
    grads.add1("enc.final_ln.g", &dg);
    grads.add1("enc.final_ln.b", &db);

    for (i, block) in cache.blocks.iter().enumerate().rev() {
        // Feed-forward residual.
        let ffn_prefix = format!("enc.{i}.ffn");
        let (db_in, fgrads) = ffn_backward(&dx, &block.ffn, &ffn_views(params, &ffn_prefix));
        add_ffn_grads(grads, &ffn_prefix, &fgrads);
        let (dx2, dg2, db2) =
            layer_norm_backward(&db_in, &block.ln2, params.view1(&format!("enc.{i}.ln2.g")));
        grads.add1(&format!("enc.{i}.ln2.g"), &dg2);
        grads.add1(&format!("enc.{i}.ln2.b"), &db2);
        dx += &dx2;

        // Attention residual; self-attention feeds both query and key/value.
        let attn_prefix = format!("enc.{i}.attn");
        let (dq_in, dkv_in, agrads) =
            mha_backward(&dx, &block.attn, &attn_views(params, &attn_prefix), n_heads);
        add_attn_grads(grads, &attn_prefix, &agrads);
        let da = dq_in + dkv_in;
        let (dx1, dg1, db1) =
            layer_norm_backward(&da, &block.ln1, params.view1(&format!("enc.{i}.ln1.g")));
        grads.add1(&format!("enc.{i}.ln1.g"), &dg1);
        grads.add1(&format!("enc.{i}.ln1.b"), &db1);
        dx += &dx1;
    }

    for (p, &id) in cache.ids.iter().enumerate() {
        grads.add_row("embed.tok", id as usize, dx.row(p));
        grads.add_row("embed.pos_enc", p, dx.row(p));
    }
}

struct DecBlockCache<F: Scalar> {
    ln1: LayerNormCache<F>,
    self_attn: AttnCache<F>,
    ln2: LayerNormCache<F>,
    cross: AttnCache<F>,
    ln3: LayerNormCache<F>,
    ffn: FfnCache<F>,
}

/// Every activation the decoder backward pass needs.
pub struct DecoderCache<F: Scalar> {
    input_ids: Vec<u32>,
    blocks: Vec<DecBlockCache<F>>,
    final_ln: LayerNormCache<F>,
    /// Final decoder states; logits are `g_final . embed.tok^T`.
    g_final: Array2<F>,
}

/// Runs the decoder over `input_ids` with cross-attention into `memory`,
/// returning `[seq_len, vocab]` logits through the tied embedding.
pub fn decode_with_cache<F: Scalar>(
    params: &Parameters<F>,
    memory: &EncoderOutput<F>,
    input_ids: &[u32],
) -> Result<(Array2<F>, DecoderCache<F>), ModelError> {
    if memory.hidden.ncols() != params.config().d_model {
        return Err(ModelError::DimMismatch(format!(
            "memory width {} != d_model {}",
            memory.hidden.ncols(),
            params.config().d_model
        )));
    }
    let mut y = embed(
        params,
        input_ids,
        "embed.pos_dec",
        params.config().max_positions_dec,
        "decoder",
    )?;
    let n_heads = params.config().n_heads;
    let mut blocks = Vec::with_capacity(params.config().n_dec_layers);
    for i in 0..params.config().n_dec_layers {
        let (a, ln1) = layer_norm_forward(
            &y,
            params.view1(&format!("dec.{i}.ln1.g")),
            params.view1(&format!("dec.{i}.ln1.b")),
        );
        let (s, self_attn) = mha_forward(
            &a,
            &a,
            &attn_views(params, &format!("dec.{i}.self")),
            n_heads,
            Visibility::Causal,
            None,
            None,
        );
        y += &s;
        let (a2, ln2) = layer_norm_forward(
            &y,
            params.view1(&format!("dec.{i}.ln2.g")),
            params.view1(&format!("dec.{i}.ln2.b")),
        );
        let (c, cross) = mha_forward(
            &a2,
            &memory.hidden,
            &attn_views(params, &format!("dec.{i}.cross")),
            n_heads,
            Visibility::Full,
            Some(&memory.pad),
            None,
        );
        y += &c;
        let (b, ln3) = layer_norm_forward(
            &y,
            params.view1(&format!("dec.{i}.ln3.g")),
            params.view1(&format!("dec.{i}.ln3.b")),
        );
        let (f, ffn) = ffn_forward(&b, &ffn_views(params, &format!("dec.{i}.ffn")));
        y += &f;
        blocks.push(DecBlockCache {
            ln1,
            self_attn,
            ln2,
            cross,
            ln3,
            ffn,
        });
    }
    let (g_final, final_ln) = layer_norm_forward(
        &y,
        params.view1("dec.final_ln.g"),
        params.view1("dec.final_ln.b"),
    );
    let logits = g_final.dot(&params.view2("embed.tok").t());
    Ok((
        logits,
        DecoderCache {
            input_ids: input_ids.to_vec(),
            blocks,
            final_ln,
            g_final,
        },
    ))
}

/// Backpropagates `d_logits` through the decoder, accumulating parameter
/// gradients and returning the gradient with respect to the encoder memory.
pub fn decoder_backward<F: Scalar>(
    params: &Parameters<F>,
    cache: &DecoderCache<F>,
    d_logits: &Array2<F>,
    grads: &mut Gradients<F>,
) -> Array2<F> {
    let n_heads = params.config().n_heads;
    let embed_tok = params.view2("embed.tok");

    // Tied output projection: logits = G . E^T.
    let dg_final = d_logits.dot(&embed_tok);
    grads.add2("embed.tok", &d_logits.t().dot(&cache.g_final));

    let (mut dy, dg, db) =
        layer_norm_backward(&dg_final, &cache.final_ln, params.view1("dec.final_ln.g"));
    grads.add1("dec.final_ln.g", &dg);
    grads.add1("dec.final_ln.b", &db);

    let mut d_memory: Option<Array2<F>> = None;
    for (i, block) in cache.blocks.iter().enumerate().rev() {
        let ffn_prefix = format!("dec.{i}.ffn");
        let (db_in, fgrads) = ffn_backward(&dy, &block.ffn, &ffn_views(params, &ffn_prefix));
        add_ffn_grads(grads, &ffn_prefix, &fgrads);
        let (dy3, dg3, db3) =
            layer_norm_backward(&db_in, &block.ln3, params.view1(&format!("dec.{i}.ln3.g")));
        grads.add1(&format!("dec.{i}.ln3.g"), &dg3);
        grads.add1(&format!("dec.{i}.ln3.b"), &db3);
        dy += &dy3;

        let cross_prefix = format!("dec.{i}.cross");
        let (dq_in, dmem_part, cgrads) =
            mha_backward(&dy, &block.cross, &attn_views(params, &cross_prefix), n_heads);
        add_attn_grads(grads, &cross_prefix, &cgrads);
        match &mut d_memory {
            Some(acc) => *acc += &dmem_part,
            None => d_memory = Some(dmem_part),
        }
        let (dy2, dg2, db2) =
            layer_norm_backward(&dq_in, &block.ln2, params.view1(&format!("dec.{i}.ln2.g")));
        grads.add1(&format!("dec.{i}.ln2.g"), &dg2);
        grads.add1(&format!("dec.{i}.ln2.b"), &db2);
        dy += &dy2;

        let self_prefix = format!("dec.{i}.self");
        let (dq_in, dkv_in, sgrads) = mha_backward(
            &dy,
            &block.self_attn,
            &attn_views(params, &self_prefix),
            n_heads,
        );
        add_attn_grads(grads, &self_prefix, &sgrads);
        let da = dq_in + dkv_in;
        let (dy1, dg1, db1) =
            layer_norm_backward(&da, &block.ln1, params.view1(&format!("dec.{i}.ln1.g")));
        grads.add1(&format!("dec.{i}.ln1.g"), &dg1);
        grads.add1(&format!("dec.{i}.ln1.b"), &db1);
        dy += &dy1;
    }

    for (p, &id) in cache.input_ids.iter().enumerate() {
        grads.add_row("embed.tok", id as usize, dy.row(p));
        grads.add_row("embed.pos_dec", p, dy.row(p));
    }
    d_memory.expect("decoder has at least one layer")
}

/// Tied-embedding classification logits at selected encoder positions,
/// `[positions.len(), vocab]`.
pub fn mlm_logits<F: Scalar>(
    params: &Parameters<F>,
    hidden: &Array2<F>,
    positions: &[usize],
) -> Result<Array2<F>, ModelError> {
    let mut rows = Array2::zeros((positions.len(), hidden.ncols()));
    for (r, &p) in positions.iter().enumerate() {
        if p >= hidden.nrows() {
            return Err(ModelError::PositionOutOfRange {
                pos: p,
                len: hidden.nrows(),
            });
        }
        rows.row_mut(r).assign(&hidden.row(p));
    }
    Ok(rows.dot(&params.view2("embed.tok").t()))
}

/// Splits `d_logits` from [`mlm_logits`] into the hidden-state gradient
/// contribution (returned, shaped like `hidden`) and the tied-embedding
/// gradient (accumulated).
pub(crate) fn mlm_backward<F: Scalar>(
    params: &Parameters<F>,
    hidden: &Array2<F>,
    positions: &[usize],
    d_logits: &Array2<F>,
    grads: &mut Gradients<F>,
) -> Array2<F> {
    let embed_tok = params.view2("embed.tok");
    let d_rows = d_logits.dot(&embed_tok);
    let mut d_hidden = Array2::zeros(hidden.raw_dim());
    let mut rows = Array2::zeros((positions.len(), hidden.ncols()));
    for (r, &p) in positions.iter().enumerate() {
        let mut target = d_hidden.row_mut(p);
        target += &d_rows.row(r);
        rows.row_mut(r).assign(&hidden.row(p));
    }
    grads.add2("embed.tok", &d_logits.t().dot(&rows));
    d_hidden
}
