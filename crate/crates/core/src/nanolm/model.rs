use ndarray::{s, Array1, Array2};

use super::ops::{
    causal_attention_probs, gelu, gelu_grad, rms_norm, rms_norm_backward, softmax, softmax_backward,
};
use super::params::{BackboneParams, LayerLora, LoraParams};
use crate::error::{Error, Result};

/// One input position: a token id, or a vector injected in place of the
/// token embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum Position {
    Token(usize),
    Injected(Array1<f64>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HybridSequence {
    pub positions: Vec<Position>,
}

impl HybridSequence {
    pub fn new(positions: Vec<Position>) -> Self {
        HybridSequence { positions }
    }

    pub fn from_tokens(ids: &[usize]) -> Self {
        HybridSequence {
            positions: ids.iter().map(|&t| Position::Token(t)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn injected_offsets(&self) -> Vec<usize> {
        self.positions
            .iter()
            .enumerate()
            .filter(|(_, p)| matches!(p, Position::Injected(_)))
            .map(|(t, _)| t)
            .collect()
    }
}

/// Which parameter gradients to materialize. Gradients with respect to
/// injected vectors are always produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub backbone: bool,
    pub lora: bool,
}

impl GradRequest {
    pub const ALL: GradRequest = GradRequest {
        backbone: true,
        lora: true,
    };
    pub const INPUTS_ONLY: GradRequest = GradRequest {
        backbone: false,
        lora: false,
    };
    pub const LORA: GradRequest = GradRequest {
        backbone: false,
        lora: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub backbone: Option<BackboneParams>,
    pub lora: Option<LoraParams>,
    /// `(position, gradient)` for every injected position, in order.
    pub injected: Vec<(usize, Array1<f64>)>,
}

struct LayerCache {
    x_in: Array2<f64>,
    attn_inv: Array1<f64>,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// `a A` for the query and value adapters.
    lora_q: Option<Array2<f64>>,
    lora_v: Option<Array2<f64>>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    x_mid: Array2<f64>,
    ffn_inv: Array1<f64>,
    b: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    x_final: Array2<f64>,
    final_inv: Array1<f64>,
    /// Normalized final hidden states; logits are `z E^T`.
    z: Array2<f64>,
}

fn check_lora(params: &BackboneParams, lora: Option<&LoraParams>) -> Result<()> {
    if let Some(l) = lora {
        if l.layers.len() != params.layers.len() {
            return Err(Error::Shape {
                what: "lora layers",
                expected: params.layers.len().to_string(),
                got: l.layers.len().to_string(),
            });
        }
    }
    Ok(())
}

fn embed(params: &BackboneParams, x: &HybridSequence) -> Result<Array2<f64>> {
    let cfg = &params.config;
    if x.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    if x.len() > cfg.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds max_seq_len {}",
            x.len(),
            cfg.max_seq_len
        )));
    }
    let mut h = params.pos_emb.slice(s![..x.len(), ..]).to_owned();
    for (t, p) in x.positions.iter().enumerate() {
        let mut row = h.row_mut(t);
        match p {
            Position::Token(id) => {
                if *id >= cfg.vocab_size {
                    return Err(Error::OutOfRange {
                        what: "token id",
                        index: *id,
                        len: cfg.vocab_size,
                    });
                }
                row += &params.tok_emb.row(*id);
            }
            Position::Injected(v) => {
                if v.len() != cfg.d_model {
                    return Err(Error::Shape {
                        what: "injected vector",
                        expected: cfg.d_model.to_string(),
                        got: v.len().to_string(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite injected vector at position {t}"
                    )));
                }
                row += v;
            }
        }
    }
    Ok(h)
}

fn run(
    params: &BackboneParams,
    lora: Option<&LoraParams>,
    x: &HybridSequence,
) -> Result<ForwardCache> {
    check_lora(params, lora)?;
    let cfg = &params.config;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut h = embed(params, x)?;
    let mut caches = Vec::with_capacity(params.layers.len());
    for (li, layer) in params.layers.iter().enumerate() {
        let adapters: Option<(&LayerLora, f64)> = lora.map(|l| (&l.layers[li], l.scale()));
        let (a, attn_inv) = rms_norm(&h, &layer.attn_norm);
        let mut q = a.dot(&layer.wq);
        let k = a.dot(&layer.wk);
        let mut v = a.dot(&layer.wv);
        let (mut lora_q, mut lora_v) = (None, None);
        if let Some((ad, s)) = adapters {
            let uq = a.dot(&ad.q.a);
            q.scaled_add(s, &uq.dot(&ad.q.b));
            lora_q = Some(uq);
            let uv = a.dot(&ad.v.a);
            v.scaled_add(s, &uv.dot(&ad.v.b));
            lora_v = Some(uv);
        }
        let mut ctx = Array2::zeros(h.raw_dim());
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let p = causal_attention_probs(q.slice(cols), k.slice(cols), scale);
            ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let x_mid = &h + &ctx.dot(&layer.wo);
        let (b, ffn_inv) = rms_norm(&x_mid, &layer.ffn_norm);
        let h_pre = b.dot(&layer.w1);
        let h_act = h_pre.mapv(gelu);
        let x_out = &x_mid + &h_act.dot(&layer.w2);
        caches.push(LayerCache {
            x_in: h,
            attn_inv,
            a,
            q,
            k,
            v,
            lora_q,
            lora_v,
            probs,
            ctx,
            x_mid,
            ffn_inv,
            b,
            h_pre,
            h_act,
        });
        h = x_out;
    }
    let (z, final_inv) = rms_norm(&h, &params.final_norm);
    Ok(ForwardCache {
        layers: caches,
        x_final: h,
        final_inv,
        z,
    })
}

/// Logits for every position, `L x vocab_size`.
pub fn forward(
    params: &BackboneParams,
    lora: Option<&LoraParams>,
    x: &HybridSequence,
) -> Result<Array2<f64>> {
    let cache = run(params, lora, x)?;
    Ok(cache.z.dot(&params.tok_emb.t()))
}

/// Normalized hidden state at the final position; the logits are its
/// products with the token table rows.
pub fn final_hidden(
    params: &BackboneParams,
    lora: Option<&LoraParams>,
    x: &HybridSequence,
) -> Result<Array1<f64>> {
    let cache = run(params, lora, x)?;
    Ok(cache.z.row(cache.z.nrows() - 1).to_owned())
}

/// Next-token logits at the final position.
pub fn next_token_logits(
    params: &BackboneParams,
    lora: Option<&LoraParams>,
    x: &HybridSequence,
) -> Result<Array1<f64>> {
    Ok(params.tok_emb.dot(&final_hidden(params, lora, x)?))
}

fn masked_rows(
    x: &HybridSequence,
    labels: &[usize],
    mask: &[bool],
    vocab: usize,
) -> Result<Vec<usize>> {
    if labels.len() != x.len() || mask.len() != x.len() {
        return Err(Error::Shape {
            what: "labels / loss mask",
            expected: x.len().to_string(),
            got: format!("{} / {}", labels.len(), mask.len()),
        });
    }
    let rows: Vec<usize> = (0..x.len()).filter(|&t| mask[t]).collect();
    if rows.is_empty() {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    for &t in &rows {
        if labels[t] >= vocab {
            return Err(Error::OutOfRange {
                what: "label",
                index: labels[t],
                len: vocab,
            });
        }
    }
    Ok(rows)
}

/// Per masked row: logits and softmax probabilities, and the mean
/// cross-entropy.
fn head_loss(
    params: &BackboneParams,
    cache: &ForwardCache,
    rows: &[usize],
    labels: &[usize],
) -> (Vec<Array1<f64>>, f64) {
    let mut probs = Vec::with_capacity(rows.len());
    let mut total = 0.0;
    for &t in rows {
        let logits = params.tok_emb.dot(&cache.z.row(t));
        let p = softmax(logits.view());
        total -= p[labels[t]].ln();
        probs.push(p);
    }
    (probs, total / rows.len() as f64)
}

/// Mean next-token cross-entropy (natural log) over masked positions.
pub fn loss(
    params: &BackboneParams,
    lora: Option<&LoraParams>,
    x: &HybridSequence,
    labels: &[usize],
    mask: &[bool],
) -> Result<f64> {
    let rows = masked_rows(x, labels, mask, params.config.vocab_size)?;
    let cache = run(params, lora, x)?;
    Ok(head_loss(params, &cache, &rows, labels).1)
}

/// Loss and exact gradients. Backbone and LoRA gradients are produced when
/// requested (LoRA only if adapters are attached); injected-position
/// gradients always.
pub fn backward(
    params: &BackboneParams,
    lora: Option<&LoraParams>,
    x: &HybridSequence,
    labels: &[usize],
    mask: &[bool],
    want: GradRequest,
) -> Result<(f64, GradientBundle)> {
    let cfg = &params.config;
    let rows = masked_rows(x, labels, mask, cfg.vocab_size)?;
    let cache = run(params, lora, x)?;
    let (probs, loss_value) = head_loss(params, &cache, &rows, labels);

    let mut gb = want.backbone.then(|| params.zeros_like());
    let mut gl = match (want.lora, lora) {
        (true, Some(l)) => Some(l.zeros_like()),
        _ => None,
    };

    // Output head (tied to the token table).
    let n = rows.len() as f64;
    let mut dz = Array2::<f64>::zeros(cache.z.raw_dim());
    for (&t, p) in rows.iter().zip(&probs) {
        let mut dlogits = p / n;
        dlogits[labels[t]] -= 1.0 / n;
        dz.row_mut(t).assign(&params.tok_emb.t().dot(&dlogits));
        if let Some(g) = gb.as_mut() {
            for (j, &dl) in dlogits.iter().enumerate() {
                g.tok_emb.row_mut(j).scaled_add(dl, &cache.z.row(t));
            }
        }
    }
    let mut dh = rms_norm_backward(
        &cache.x_final,
        &cache.final_inv,
        &params.final_norm,
        &dz,
        gb.as_mut().map(|g| &mut g.final_norm),
    );

    let dhead = cfg.head_dim();
    let scale = 1.0 / (dhead as f64).sqrt();
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let c = &cache.layers[li];

        // Feed-forward block.
        let d_ffn_out = &dh;
        let mut dh_act = d_ffn_out.dot(&layer.w2.t());
        if let Some(g) = gb.as_mut() {
            g.layers[li].w2 += &c.h_act.t().dot(d_ffn_out);
        }
        ndarray::Zip::from(&mut dh_act)
            .and(&c.h_pre)
            .for_each(|d, &x| *d *= gelu_grad(x));
        let db = dh_act.dot(&layer.w1.t());
        if let Some(g) = gb.as_mut() {
            g.layers[li].w1 += &c.b.t().dot(&dh_act);
        }
        let mut d_mid = rms_norm_backward(
            &c.x_mid,
            &c.ffn_inv,
            &layer.ffn_norm,
            &db,
            gb.as_mut().map(|g| &mut g.layers[li].ffn_norm),
        );
        d_mid += &dh;

        // Attention block.
        let dctx = d_mid.dot(&layer.wo.t());
        if let Some(g) = gb.as_mut() {
            g.layers[li].wo += &c.ctx.t().dot(&d_mid);
        }
        let mut dq = Array2::<f64>::zeros(c.q.raw_dim());
        let mut dk = Array2::<f64>::zeros(c.k.raw_dim());
        let mut dv = Array2::<f64>::zeros(c.v.raw_dim());
        for head in 0..cfg.n_heads {
            let cols = s![.., head * dhead..(head + 1) * dhead];
            let p = &c.probs[head];
            let dctx_h = dctx.slice(cols);
            let dp = dctx_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            let ds = softmax_backward(p, &dp) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let mut da = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
        if let Some(g) = gb.as_mut() {
            let gl_ = &mut g.layers[li];
            gl_.wq += &c.a.t().dot(&dq);
            gl_.wk += &c.a.t().dot(&dk);
            gl_.wv += &c.a.t().dot(&dv);
        }
        if let Some(l) = lora {
            let s_ = l.scale();
            let ad = &l.layers[li];
            for (dproj, u, adapter, is_q) in [
                (&dq, c.lora_q.as_ref(), &ad.q, true),
                (&dv, c.lora_v.as_ref(), &ad.v, false),
            ] {
                let u = u.expect("adapter activations cached");
                // y += s * (a A) B
                let du = dproj.dot(&adapter.b.t()) * s_;
                da += &du.dot(&adapter.a.t());
                if let Some(g) = gl.as_mut() {
                    let target = if is_q {
                        &mut g.layers[li].q
                    } else {
                        &mut g.layers[li].v
                    };
                    target.b += &(u.t().dot(dproj) * s_);
                    target.a += &c.a.t().dot(&du);
                }
            }
        }
        let d_in = rms_norm_backward(
            &c.x_in,
            &c.attn_inv,
            &layer.attn_norm,
            &da,
            gb.as_mut().map(|g| &mut g.layers[li].attn_norm),
        );
        dh = d_mid + d_in;
    }

    // Embedding inputs.
    let mut injected = Vec::new();
    for (t, p) in x.positions.iter().enumerate() {
        let row = dh.row(t);
        match p {
            Position::Token(id) => {
                if let Some(g) = gb.as_mut() {
                    g.tok_emb.row_mut(*id).scaled_add(1.0, &row);
                }
            }
            Position::Injected(_) => injected.push((t, row.to_owned())),
        }
        if let Some(g) = gb.as_mut() {
            g.pos_emb.row_mut(t).scaled_add(1.0, &row);
        }
    }

    Ok((
        loss_value,
        GradientBundle {
            backbone: gb,
            lora: gl,
            injected,
        },
    ))
}

#[cfg(test)]
pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(ndarray::Axis(0)) {
        let p = softmax(row.view());
        row.assign(&p);
    }
    out
}

#[cfg(test)]
#[path = "tests.rs"]
mod tests;
