//! Scaled dot-product attention under three visibility regimes: a fixed
//! window around each position (encoder self-attention), causal (decoder
//! self-attention), and full (cross-attention). Padding keys are excluded
//! exactly; padding queries produce zero context rows.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use super::ModelError;
use crate::Scalar;

/// Which keys each query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    /// Keys within `radius` positions on either side of the query.
    Window { radius: usize },
    /// Keys at or before the query position.
    Causal,
    /// Every key.
    Full,
}

impl Visibility {
    /// Half-open index range of potentially visible keys for query `i`.
    fn bounds(self, i: usize, n_keys: usize) -> (usize, usize) {
        match self {
            Visibility::Window { radius } => {
                (i.saturating_sub(radius), (i + radius + 1).min(n_keys))
            }
            Visibility::Causal => (0, (i + 1).min(n_keys)),
            Visibility::Full => (0, n_keys),
        }
    }
}

/// Attention probabilities for one head: a dense `[n_query, n_key]` matrix
/// with exact zeros outside the visible set and at padding, and all-zero
/// rows for padding queries (their context is the zero vector).
fn attention_probs<F: Scalar>(
    q: ArrayView2<'_, F>,
    k: ArrayView2<'_, F>,
    visibility: Visibility,
    key_pad: Option<&[bool]>,
    query_pad: Option<&[bool]>,
) -> Array2<F> {
    let (nq, dh) = q.dim();
    let nk = k.nrows();
    let scale = F::from_f64_c(1.0 / (dh as f64).sqrt());
    let mut probs = Array2::zeros((nq, nk));
    for i in 0..nq {
        if query_pad.is_some_and(|p| p[i]) {
            continue;
        }
        let (lo, hi) = visibility.bounds(i, nk);
        let visible: Vec<usize> = (lo..hi)
            .filter(|&j| !key_pad.is_some_and(|p| p[j]))
            .collect();
        if visible.is_empty() {
            continue;
        }
        let q_row = q.row(i);
        let scores: Vec<F> = visible
            .iter()
            .map(|&j| q_row.dot(&k.row(j)) * scale)
            .collect();
        let max = scores.iter().copied().fold(scores[0], F::max);
        let exps: Vec<F> = scores.iter().map(|&s| (s - max).exp()).collect();
        let total: F = exps.iter().copied().sum();
        for (&j, &e) in visible.iter().zip(&exps) {
            probs[(i, j)] = e / total;
        }
    }
    probs
}

/// Single-head windowed attention over raw query/key/value matrices:
/// `out_i = sum_j softmax_j(q_i . k_j / sqrt(d)) v_j` with `j` restricted to
/// the window of odd width `window` centered on `i`. With `window == 1`
/// each output row equals the corresponding value row. Keys flagged in
/// `key_pad` are invisible; a query with nothing visible yields a zero row.
pub fn windowed_attention<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    window: usize,
    key_pad: Option<&[bool]>,
) -> Result<Array2<F>, ModelError> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(ModelError::BadWindow(window));
    }
    if q.ncols() != k.ncols() {
        return Err(ModelError::DimMismatch(format!(
            "query dim {} != key dim {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() != v.nrows() {
        return Err(ModelError::DimMismatch(format!(
            "{} keys but {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    if let Some(pad) = key_pad {
        if pad.len() != k.nrows() {
            return Err(ModelError::DimMismatch(format!(
                "pad mask of length {} for {} keys",
                pad.len(),
                k.nrows()
            )));
        }
    }
    let radius = (window - 1) / 2;
    let probs = attention_probs(
        q.view(),
        k.view(),
        Visibility::Window { radius },
        key_pad,
        None,
    );
    Ok(probs.dot(v))
}

/// Projection weights of one multi-head attention block.
pub(crate) struct AttnViews<'a, F: Scalar> {
    pub wq: ArrayView2<'a, F>,
    pub wk: ArrayView2<'a, F>,
    pub wv: ArrayView2<'a, F>,
    pub wo: ArrayView2<'a, F>,
    pub bq: ArrayView1<'a, F>,
    pub bv: ArrayView1<'a, F>,
    pub bo: ArrayView1<'a, F>,
}

pub(crate) struct AttnCache<F: Scalar> {
    q_in: Array2<F>,
    kv_in: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Per-head probability matrices, `[n_query, n_key]` each.
    probs: Vec<Array2<F>>,
    /// Concatenated head contexts before the output projection.
    ctx: Array2<F>,
}

pub(crate) struct AttnGrads<F: Scalar> {
    pub dwq: Array2<F>,
    pub dwk: Array2<F>,
    pub dwv: Array2<F>,
    pub dwo: Array2<F>,
    pub dbq: Array1<F>,
    pub dbv: Array1<F>,
    pub dbo: Array1<F>,
}

/// Multi-head attention with projections; returns output and the cache the
/// backward pass needs.
pub(crate) fn mha_forward<F: Scalar>(
    q_in: &Array2<F>,
    kv_in: &Array2<F>,
    views: &AttnViews<'_, F>,
    n_heads: usize,
    visibility: Visibility,
    key_pad: Option<&[bool]>,
    query_pad: Option<&[bool]>,
) -> (Array2<F>, AttnCache<F>) {
    let d = q_in.ncols();
    let dh = d / n_heads;
    let mut q = q_in.dot(&views.wq);
    q += &views.bq;
    // The key projection carries no bias: softmax shifts every score of a
    // query by the same amount under a shared key offset, so a key bias
    // would be inert and its gradient identically zero.
    let k = kv_in.dot(&views.wk);
    let mut v = kv_in.dot(&views.wv);
    v += &views.bv;

    let mut ctx = Array2::zeros((q_in.nrows(), d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = attention_probs(q.slice(cols), k.slice(cols), visibility, key_pad, query_pad);
        ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let mut out = ctx.dot(&views.wo);
    out += &views.bo;
    (
        out,
        AttnCache {
            q_in: q_in.clone(),
            kv_in: kv_in.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

/// Backward pass of [`mha_forward`]; returns `(d_q_in, d_kv_in, grads)`.
/// For self-attention (`q_in` is `kv_in`) the caller adds both input grads.
pub(crate) fn mha_backward<F: Scalar>(
    dout: &Array2<F>,
    cache: &AttnCache<F>,
    views: &AttnViews<'_, F>,
    n_heads: usize,
) -> (Array2<F>, Array2<F>, AttnGrads<F>) {
    let (nq, d) = cache.q.dim();
    let nk = cache.k.nrows();
    let dh = d / n_heads;
    let scale = F::from_f64_c(1.0 / (dh as f64).sqrt());

    let dctx = dout.dot(&views.wo.t());
    let dwo = cache.ctx.t().dot(dout);
    let dbo = dout.sum_axis(ndarray::Axis(0));

    let mut dq = Array2::zeros((nq, d));
    let mut dk = Array2::zeros((nk, d));
    let mut dv = Array2::zeros((nk, d));
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let dctx_h = dctx.slice(cols);
        let v_h = cache.v.slice(cols);
        let k_h = cache.k.slice(cols);
        let q_h = cache.q.slice(cols);

        dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
        let dp = dctx_h.dot(&v_h.t());
        // Softmax backward row by row; zero-probability entries stay zero.
        let mut ds = Array2::zeros((nq, nk));
        for i in 0..nq {
            let p_row = p.row(i);
            let dp_row = dp.row(i);
            let dot: F = p_row
                .iter()
                .zip(dp_row.iter())
                .map(|(&a, &b)| a * b)
                .sum();
            for j in 0..nk {
                ds[(i, j)] = p_row[j] * (dp_row[j] - dot);
            }
        }
        dq.slice_mut(cols).assign(&(ds.dot(&k_h) * scale));
        dk.slice_mut(cols).assign(&(ds.t().dot(&q_h) * scale));
    }

    let dq_in = dq.dot(&views.wq.t());
    let dkv_in = dk.dot(&views.wk.t()) + dv.dot(&views.wv.t());
    let grads = AttnGrads {
        dwq: cache.q_in.t().dot(&dq),
        dwk: cache.kv_in.t().dot(&dk),
        dwv: cache.kv_in.t().dot(&dv),
        dwo,
        dbq: dq.sum_axis(ndarray::Axis(0)),
        dbv: dv.sum_axis(ndarray::Axis(0)),
        dbo,
    };
    (dq_in, dkv_in, grads)
}
