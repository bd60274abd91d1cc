//! Forward/backward kernels for the transformer towers. Forward functions
//! return caches holding exactly the intermediates their backward pass needs;
//! backward functions accumulate parameter gradients into a mirror of the
//! parameter structs.
//!
//! All activations are `[seq, width]` row-major f64 slices.

use crate::tensor::{matmul, matmul_nt, matmul_tn_acc, Tensor};

use super::{AttentionParams, BlockParams, LayerNormParams};

pub(crate) const LN_EPS: f64 = 1e-5;
/// Additive score for masked-out attention keys; exp() underflows to exactly
/// zero so masked keys contribute nothing in either direction.
pub(crate) const MASK_BIAS: f64 = -1e30;

// ---------------------------------------------------------------- layernorm

pub(crate) struct LayerNormCache {
    /// Normalized activations, [seq, width].
    xhat: Vec<f64>,
    /// Reciprocal standard deviation per row.
    rstd: Vec<f64>,
}

pub(crate) fn layernorm_fw(
    x: &[f64],
    seq: usize,
    width: usize,
    p: &LayerNormParams,
) -> (Vec<f64>, LayerNormCache) {
    let gamma = p.gamma.data();
    let beta = p.beta.data();
    let mut y = vec![0.0; seq * width];
    let mut xhat = vec![0.0; seq * width];
    let mut rstd = vec![0.0; seq];
    for i in 0..seq {
        let row = &x[i * width..(i + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        let xh = &mut xhat[i * width..(i + 1) * width];
        let yr = &mut y[i * width..(i + 1) * width];
        for j in 0..width {
            let h = (row[j] - mean) * r;
            xh[j] = h;
            yr[j] = gamma[j] * h + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub(crate) fn layernorm_bw(
    dy: &[f64],
    seq: usize,
    width: usize,
    p: &LayerNormParams,
    cache: &LayerNormCache,
    grad: &mut LayerNormParams,
) -> Vec<f64> {
    let gamma = p.gamma.data();
    let dgamma = grad.gamma.data_mut();
    let dbeta = grad.beta.data_mut();
    let mut dx = vec![0.0; seq * width];
    let inv_w = 1.0 / width as f64;
    for i in 0..seq {
        let dyr = &dy[i * width..(i + 1) * width];
        let xh = &cache.xhat[i * width..(i + 1) * width];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..width {
            let dxh = dyr[j] * gamma[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
        }
        let dxr = &mut dx[i * width..(i + 1) * width];
        let r = cache.rstd[i];
        for j in 0..width {
            let dxh = dyr[j] * gamma[j];
            dxr[j] = r * (dxh - inv_w * sum_dxhat - xh[j] * inv_w * sum_dxhat_xhat);
        }
    }
    dx
}

// ------------------------------------------------------------------- linear

/// y = x . w + b, x [seq, fan_in], w [fan_in, fan_out].
pub(crate) fn linear_fw(x: &[f64], seq: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (fan_in, fan_out) = (w.dims()[0], w.dims()[1]);
    let mut y = matmul(x, w.data(), seq, fan_in, fan_out);
    for i in 0..seq {
        let row = &mut y[i * fan_out..(i + 1) * fan_out];
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    y
}

/// Accumulates dw/db, returns dx.
pub(crate) fn linear_bw(
    x: &[f64],
    dy: &[f64],
    seq: usize,
    w: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Vec<f64> {
    let (fan_in, fan_out) = (w.dims()[0], w.dims()[1]);
    matmul_tn_acc(dw.data_mut(), x, dy, seq, fan_in, fan_out);
    let dbd = db.data_mut();
    for i in 0..seq {
        let row = &dy[i * fan_out..(i + 1) * fan_out];
        for (acc, &v) in dbd.iter_mut().zip(row) {
            *acc += v;
        }
    }
    matmul_nt(dy, w.data(), seq, fan_out, fan_in)
}

// --------------------------------------------------------------- quick gelu

/// x * sigmoid(1.702 x): smooth gelu approximation with a cheap derivative.
pub(crate) fn quick_gelu_fw(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(1.702 * v)).collect()
}

pub(crate) fn quick_gelu_bw(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(1.702 * v);
            d * (s + 1.702 * v * s * (1.0 - s))
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------- attention

pub(crate) struct AttentionCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax probabilities per head, each [seq, seq].
    probs: Vec<Vec<f64>>,
    /// Concatenated per-head context vectors, [seq, width]; input of the
    /// output projection.
    context: Vec<f64>,
}

/// Bidirectional multi-head attention. `key_bias`, when present, is added to
/// every query's scores (0 for valid keys, `MASK_BIAS` for padding).
pub(crate) fn attention_fw(
    x: &[f64],
    seq: usize,
    width: usize,
    heads: usize,
    p: &AttentionParams,
    key_bias: Option<&[f64]>,
) -> (Vec<f64>, AttentionCache) {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear_fw(x, seq, &p.wq, &p.bq);
    let k = linear_fw(x, seq, &p.wk, &p.bk);
    let v = linear_fw(x, seq, &p.wv, &p.bv);

    let mut context = vec![0.0; seq * width];
    let mut probs = Vec::with_capacity(heads);
    let mut qh = vec![0.0; seq * dh];
    let mut kh = vec![0.0; seq * dh];
    let mut vh = vec![0.0; seq * dh];
    for h in 0..heads {
        gather_head(&q, &mut qh, seq, width, dh, h);
        gather_head(&k, &mut kh, seq, width, dh, h);
        gather_head(&v, &mut vh, seq, width, dh, h);

        let mut scores = matmul_nt(&qh, &kh, seq, dh, seq);
        for s in scores.iter_mut() {
            *s *= scale;
        }
        if let Some(bias) = key_bias {
            for i in 0..seq {
                let row = &mut scores[i * seq..(i + 1) * seq];
                for (sv, &bv) in row.iter_mut().zip(bias) {
                    *sv += bv;
                }
            }
        }
        softmax_rows(&mut scores, seq, seq);
        let ctx_h = matmul(&scores, &vh, seq, seq, dh);
        scatter_head(&ctx_h, &mut context, seq, width, dh, h);
        probs.push(scores);
    }
    let out = linear_fw(&context, seq, &p.wo, &p.bo);
    let cache = AttentionCache { x: x.to_vec(), q, k, v, probs, context };
    (out, cache)
}

pub(crate) fn attention_bw(
    dy: &[f64],
    seq: usize,
    width: usize,
    heads: usize,
    p: &AttentionParams,
    cache: &AttentionCache,
    grad: &mut AttentionParams,
) -> Vec<f64> {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dcontext = linear_bw(&cache.context, dy, seq, &p.wo, &mut grad.wo, &mut grad.bo);

    let mut dq = vec![0.0; seq * width];
    let mut dk = vec![0.0; seq * width];
    let mut dv = vec![0.0; seq * width];
    let mut qh = vec![0.0; seq * dh];
    let mut kh = vec![0.0; seq * dh];
    let mut vh = vec![0.0; seq * dh];
    let mut dctx_h = vec![0.0; seq * dh];
    for h in 0..heads {
        gather_head(&cache.q, &mut qh, seq, width, dh, h);
        gather_head(&cache.k, &mut kh, seq, width, dh, h);
        gather_head(&cache.v, &mut vh, seq, width, dh, h);
        gather_head(&dcontext, &mut dctx_h, seq, width, dh, h);
        let probs = &cache.probs[h];

        // context_h = probs . vh
        let mut dprobs = matmul_nt(&dctx_h, &vh, seq, dh, seq);
        let mut dvh = vec![0.0; seq * dh];
        matmul_tn_acc(&mut dvh, probs, &dctx_h, seq, seq, dh);

        // softmax backward, rows independent
        for i in 0..seq {
            let prow = &probs[i * seq..(i + 1) * seq];
            let dprow = &mut dprobs[i * seq..(i + 1) * seq];
            let inner: f64 = prow.iter().zip(dprow.iter()).map(|(&pv, &dv)| pv * dv).sum();
            for (d, &pv) in dprow.iter_mut().zip(prow) {
                *d = pv * (*d - inner);
            }
        }
        // scores = scale * qh . kh^T  (+ constant bias)
        let mut dqh = matmul(&dprobs, &kh, seq, seq, dh);
        for d in dqh.iter_mut() {
            *d *= scale;
        }
        let mut dkh = vec![0.0; seq * dh];
        matmul_tn_acc(&mut dkh, &dprobs, &qh, seq, seq, dh);
        for d in dkh.iter_mut() {
            *d *= scale;
        }

        scatter_head(&dqh, &mut dq, seq, width, dh, h);
        scatter_head(&dkh, &mut dk, seq, width, dh, h);
        scatter_head(&dvh, &mut dv, seq, width, dh, h);
    }

    let mut dx = linear_bw(&cache.x, &dq, seq, &p.wq, &mut grad.wq, &mut grad.bq);
    let dx_k = linear_bw(&cache.x, &dk, seq, &p.wk, &mut grad.wk, &mut grad.bk);
    let dx_v = linear_bw(&cache.x, &dv, seq, &p.wv, &mut grad.wv, &mut grad.bv);
    for ((a, b), c) in dx.iter_mut().zip(&dx_k).zip(&dx_v) {
        *a += b + c;
    }
    dx
}

fn gather_head(full: &[f64], head: &mut [f64], seq: usize, width: usize, dh: usize, h: usize) {
    for i in 0..seq {
        let src = &full[i * width + h * dh..i * width + (h + 1) * dh];
        head[i * dh..(i + 1) * dh].copy_from_slice(src);
    }
}

fn scatter_head(head: &[f64], full: &mut [f64], seq: usize, width: usize, dh: usize, h: usize) {
    for i in 0..seq {
        let dst = &mut full[i * width + h * dh..i * width + (h + 1) * dh];
        dst.copy_from_slice(&head[i * dh..(i + 1) * dh]);
    }
}

fn softmax_rows(scores: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        let row = &mut scores[i * cols..(i + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
}

// -------------------------------------------------------- transformer block

pub(crate) struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: Vec<f64>,
    mlp_pre: Vec<f64>,
    mlp_act: Vec<f64>,
}

/// Pre-LN residual block: x + attn(ln1(x)), then + mlp(ln2(.)).
pub(crate) fn block_fw(
    x: &[f64],
    seq: usize,
    width: usize,
    heads: usize,
    p: &BlockParams,
    key_bias: Option<&[f64]>,
) -> (Vec<f64>, BlockCache) {
    let (ln1_out, ln1) = layernorm_fw(x, seq, width, &p.ln1);
    let (attn_out, attn) = attention_fw(&ln1_out, seq, width, heads, &p.attn, key_bias);
    let x1: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

    let (ln2_out, ln2) = layernorm_fw(&x1, seq, width, &p.ln2);
    let mlp_pre = linear_fw(&ln2_out, seq, &p.mlp.w1, &p.mlp.b1);
    let mlp_act = quick_gelu_fw(&mlp_pre);
    let mlp_out = linear_fw(&mlp_act, seq, &p.mlp.w2, &p.mlp.b2);
    let x2: Vec<f64> = x1.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();

    let cache = BlockCache { ln1, attn, ln2, ln2_out, mlp_pre, mlp_act };
    (x2, cache)
}

pub(crate) fn block_bw(
    dy: &[f64],
    seq: usize,
    width: usize,
    heads: usize,
    p: &BlockParams,
    cache: &BlockCache,
    grad: &mut BlockParams,
) -> Vec<f64> {
    // mlp branch
    let dmlp_act = linear_bw(&cache.mlp_act, dy, seq, &p.mlp.w2, &mut grad.mlp.w2, &mut grad.mlp.b2);
    let dmlp_pre = quick_gelu_bw(&cache.mlp_pre, &dmlp_act);
    let dln2_out =
        linear_bw(&cache.ln2_out, &dmlp_pre, seq, &p.mlp.w1, &mut grad.mlp.w1, &mut grad.mlp.b1);
    let dx1_ln = layernorm_bw(&dln2_out, seq, width, &p.ln2, &cache.ln2, &mut grad.ln2);
    let dx1: Vec<f64> = dy.iter().zip(&dx1_ln).map(|(a, b)| a + b).collect();

    // attention branch
    let dattn = attention_bw(&dx1, seq, width, heads, &p.attn, &cache.attn, &mut grad.attn);
    let dx_ln = layernorm_bw(&dattn, seq, width, &p.ln1, &cache.ln1, &mut grad.ln1);
    dx1.iter().zip(&dx_ln).map(|(a, b)| a + b).collect()
}

// -------------------------------------------------------------------- tower

pub(crate) struct TowerCache {
    blocks: Vec<BlockCache>,
    ln_final: LayerNormCache,
}

pub(crate) struct TowerGrads<'a> {
    pub blocks: &'a mut [BlockParams],
    pub ln_final: &'a mut LayerNormParams,
}

pub(crate) fn tower_fw(
    x0: &[f64],
    seq: usize,
    width: usize,
    heads: usize,
    blocks: &[BlockParams],
    ln_final: &LayerNormParams,
    key_bias: Option<&[f64]>,
) -> (Vec<f64>, TowerCache) {
    let mut x = x0.to_vec();
    let mut caches = Vec::with_capacity(blocks.len());
    for block in blocks {
        let (next, cache) = block_fw(&x, seq, width, heads, block, key_bias);
        x = next;
        caches.push(cache);
    }
    let (h, ln_cache) = layernorm_fw(&x, seq, width, ln_final);
    (h, TowerCache { blocks: caches, ln_final: ln_cache })
}

pub(crate) fn tower_bw(
    dh: &[f64],
    seq: usize,
    width: usize,
    heads: usize,
    blocks: &[BlockParams],
    ln_final: &LayerNormParams,
    cache: &TowerCache,
    grads: TowerGrads<'_>,
) -> Vec<f64> {
    // ln_final backward needs the block-stack output, reachable through the
    // last block cache; layernorm_bw only uses its own cache.
    let mut dx = layernorm_bw(dh, seq, width, ln_final, &cache.ln_final, grads.ln_final);
    for ((block, bcache), grad) in blocks
        .iter()
        .zip(&cache.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        dx = block_bw(&dx, seq, width, heads, block, bcache, grad);
    }
    dx
}
