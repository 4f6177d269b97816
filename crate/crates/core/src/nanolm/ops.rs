use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

pub(crate) const RMS_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise RMS normalization with gain `1 + offset`. Returns the output and
/// the per-row inverse RMS needed by the backward pass.
pub(crate) fn rms_norm(x: &Array2<f64>, offset: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let inv: Array1<f64> = x
        .rows()
        .into_iter()
        .map(|r| 1.0 / (r.dot(&r) / d + RMS_EPS).sqrt())
        .collect();
    let mut y = x.clone();
    for (mut row, &s) in y.rows_mut().into_iter().zip(inv.iter()) {
        Zip::from(&mut row)
            .and(offset)
            .for_each(|v, &g| *v *= s * (1.0 + g));
    }
    (y, inv)
}

/// Backward of [`rms_norm`]. Accumulates into `d_offset` when given and
/// returns the input gradient.
pub(crate) fn rms_norm_backward(
    x: &Array2<f64>,
    inv: &Array1<f64>,
    offset: &Array1<f64>,
    dy: &Array2<f64>,
    d_offset: Option<&mut Array1<f64>>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    if let Some(d_offset) = d_offset {
        for ((xr, dyr), &s) in x.rows().into_iter().zip(dy.rows()).zip(inv.iter()) {
            Zip::from(&mut *d_offset)
                .and(&xr)
                .and(&dyr)
                .for_each(|g, &xv, &dv| *g += dv * xv * s);
        }
    }
    let mut dx = Array2::zeros(x.raw_dim());
    for (((mut dxr, xr), dyr), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(x.rows())
        .zip(dy.rows())
        .zip(inv.iter())
    {
        // dxhat = dy * gamma, xhat = x * s
        let mut dot = 0.0;
        for ((&dv, &xv), &g) in dyr.iter().zip(xr.iter()).zip(offset.iter()) {
            dot += dv * (1.0 + g) * xv * s;
        }
        let mean = dot / d;
        Zip::from(&mut dxr)
            .and(&xr)
            .and(&dyr)
            .and(offset)
            .for_each(|o, &xv, &dv, &g| *o = s * (dv * (1.0 + g) - xv * s * mean));
    }
    dx
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = row.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// Causal attention probabilities for one head: `softmax(q k^T * scale)`
/// with every key after the query position masked out.
pub(crate) fn causal_attention_probs(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    scale: f64,
) -> Array2<f64> {
    let mut scores = q.dot(&k.t());
    let l = scores.nrows();
    for t in 0..l {
        let mut row = scores.row_mut(t);
        let visible = row.slice(ndarray::s![..=t]).to_owned();
        let p = softmax((visible * scale).view());
        row.fill(0.0);
        row.slice_mut(ndarray::s![..=t]).assign(&p);
    }
    scores
}

/// Softmax backward restricted to each row's visible prefix:
/// `dS = P * (dP - rowsum(dP * P))`.
pub(crate) fn softmax_backward(probs: &Array2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let inner = (probs * d_probs).sum_axis(Axis(1));
    let mut ds = d_probs.clone();
    for ((mut row, prow), &c) in ds
        .rows_mut()
        .into_iter()
        .zip(probs.rows())
        .zip(inner.iter())
    {
        Zip::from(&mut row)
            .and(&prow)
            .for_each(|d, &p| *d = p * (*d - c));
    }
    ds
}
