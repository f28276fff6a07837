//! Dense, layer-norm, and GELU primitives with explicit reverse-mode
//! backward passes. Forward functions return a cache holding exactly the
//! activations their backward needs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{GELU_A, GELU_C, LN_EPS};
use crate::Scalar;

pub(crate) struct LinearCache<F: Scalar> {
    x: Array2<F>,
}

/// `y = x . w + b` over rows of `x`.
pub(crate) fn linear_forward<F: Scalar>(
    x: &Array2<F>,
    w: ArrayView2<'_, F>,
    b: ArrayView1<'_, F>,
) -> (Array2<F>, LinearCache<F>) {
    let mut y = x.dot(&w);
    y += &b;
    (y, LinearCache { x: x.clone() })
}

/// Returns `(dx, dw, db)` for the cached forward call.
pub(crate) fn linear_backward<F: Scalar>(
    dy: &Array2<F>,
    cache: &LinearCache<F>,
    w: ArrayView2<'_, F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let dx = dy.dot(&w.t());
    let dw = cache.x.t().dot(dy);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

pub(crate) struct LayerNormCache<F: Scalar> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

/// Row-wise layer norm: `y = (x - mean) / sqrt(var + eps) * g + b` with the
/// biased variance.
pub(crate) fn layer_norm_forward<F: Scalar>(
    x: &Array2<F>,
    g: ArrayView1<'_, F>,
    b: ArrayView1<'_, F>,
) -> (Array2<F>, LayerNormCache<F>) {
    let d = F::from_f64_c(x.ncols() as f64);
    let eps = F::from_f64_c(LN_EPS);
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / d;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[i] = inv;
        for (j, &v) in row.iter().enumerate() {
            xhat[(i, j)] = (v - mean) * inv;
        }
    }
    let mut y = xhat.clone();
    y *= &g;
    y += &b;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dg, db)` for the cached forward call.
pub(crate) fn layer_norm_backward<F: Scalar>(
    dy: &Array2<F>,
    cache: &LayerNormCache<F>,
    g: ArrayView1<'_, F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let d = F::from_f64_c(dy.ncols() as f64);
    let mut dxhat = dy.clone();
    dxhat *= &g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dxhat_row = dxhat.row(i);
        let xhat_row = cache.xhat.row(i);
        let m1 = dxhat_row.sum() / d;
        let m2 = dxhat_row
            .iter()
            .zip(xhat_row.iter())
            .map(|(&a, &b)| a * b)
            .sum::<F>()
            / d;
        let inv = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[(i, j)] = inv * (dxhat_row[j] - m1 - xhat_row[j] * m2);
        }
    }
    let dg = (dy * &cache.xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    (dx, dg, db)
}

pub(crate) struct GeluCache<F: Scalar> {
    x: Array2<F>,
    t: Array2<F>,
}

/// Tanh-approximated GELU: `0.5 x (1 + tanh(C (x + A x^3)))`.
pub(crate) fn gelu_forward<F: Scalar>(x: &Array2<F>) -> (Array2<F>, GeluCache<F>) {
    let c = F::from_f64_c(GELU_C);
    let a = F::from_f64_c(GELU_A);
    let half = F::from_f64_c(0.5);
    let t = x.mapv(|v| (c * (v + a * v * v * v)).tanh());
    let mut y = x.clone();
    y.zip_mut_with(&t, |v, &tv| *v = half * *v * (F::one() + tv));
    (y, GeluCache { x: x.clone(), t })
}

/// `dx` for the cached forward call.
pub(crate) fn gelu_backward<F: Scalar>(dy: &Array2<F>, cache: &GeluCache<F>) -> Array2<F> {
    let c = F::from_f64_c(GELU_C);
    let a3 = F::from_f64_c(3.0 * GELU_A);
    let half = F::from_f64_c(0.5);
    let mut dx = dy.clone();
    for ((i, j), v) in dx.indexed_iter_mut() {
        let x = cache.x[(i, j)];
        let t = cache.t[(i, j)];
        let du = c * (F::one() + a3 * x * x);
        let grad = half * (F::one() + t) + half * x * (F::one() - t * t) * du;
        *v *= grad;
    }
    dx
}

pub(crate) struct FfnCache<F: Scalar> {
    lin1: LinearCache<F>,
    gelu: GeluCache<F>,
    lin2: LinearCache<F>,
}

pub(crate) struct FfnViews<'a, F: Scalar> {
    pub w1: ArrayView2<'a, F>,
    pub b1: ArrayView1<'a, F>,
    pub w2: ArrayView2<'a, F>,
    pub b2: ArrayView1<'a, F>,
}

/// Position-wise feed-forward block: `linear2(gelu(linear1(x)))`.
pub(crate) fn ffn_forward<F: Scalar>(
    x: &Array2<F>,
    views: &FfnViews<'_, F>,
) -> (Array2<F>, FfnCache<F>) {
    let (h, lin1) = linear_forward(x, views.w1, views.b1);
    let (act, gelu) = gelu_forward(&h);
    let (y, lin2) = linear_forward(&act, views.w2, views.b2);
    (y, FfnCache { lin1, gelu, lin2 })
}

pub(crate) struct FfnGrads<F: Scalar> {
    pub dw1: Array2<F>,
    pub db1: Array1<F>,
    pub dw2: Array2<F>,
    pub db2: Array1<F>,
}

pub(crate) fn ffn_backward<F: Scalar>(
    dy: &Array2<F>,
    cache: &FfnCache<F>,
    views: &FfnViews<'_, F>,
) -> (Array2<F>, FfnGrads<F>) {
    let (dact, dw2, db2) = linear_backward(dy, &cache.lin2, views.w2);
    let dh = gelu_backward(&dact, &cache.gelu);
    let (dx, dw1, db1) = linear_backward(&dh, &cache.lin1, views.w1);
    (dx, FfnGrads { dw1, db1, dw2, db2 })
}
