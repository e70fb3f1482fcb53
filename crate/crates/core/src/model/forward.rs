use super::ops::{affine, gelu, normalize, rope_in_place};
use super::params::ModelParams;
use super::tensor::{dot, matmul, matmul_bt, Matrix};
use super::{ModelConfig, ModelError};
use crate::tokenizer::TokenId;

/// Activations of one block, kept for the backward pass and the monitors.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Residual stream entering the block.
    pub input: Matrix,
    pub attn_xhat: Matrix,
    pub attn_rstd: Vec<f64>,
    pub attn_in: Matrix,
    pub q_raw: Matrix,
    pub k_raw: Matrix,
    pub v: Matrix,
    /// Per-head normalized queries/keys before gain and bias.
    pub q_hat: Matrix,
    pub k_hat: Matrix,
    /// Indexed `position * n_heads + head`.
    pub q_rstd: Vec<f64>,
    pub k_rstd: Vec<f64>,
    /// Queries and keys after normalization and rotation.
    pub q: Matrix,
    pub k: Matrix,
    /// Softmax weights, `[head][row][col]` flattened; zero where masked.
    pub probs: Vec<f64>,
    /// Largest pre-softmax logit over every allowed (query, key) pair.
    pub max_logit: f64,
    pub context: Matrix,
    /// Residual stream after the attention branch.
    pub mid: Matrix,
    pub mlp_xhat: Matrix,
    pub mlp_rstd: Vec<f64>,
    pub mlp_in: Matrix,
    pub hidden_pre: Matrix,
    pub hidden: Matrix,
    /// Residual stream leaving the block.
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub layers: Vec<LayerTrace>,
    pub final_xhat: Matrix,
    pub final_rstd: Vec<f64>,
    pub final_out: Matrix,
}

/// Segment index of every position given exclusive segment end offsets.
/// Positions past the last end share one trailing segment.
pub fn segment_ids(len: usize, segment_ends: Option<&[usize]>) -> Vec<usize> {
    match segment_ends {
        None => vec![0; len],
        Some(ends) => (0..len).map(|i| ends.iter().filter(|&&e| e <= i).count()).collect(),
    }
}

#[inline]
pub(crate) fn allowed(segments: &[usize], i: usize, j: usize) -> bool {
    j <= i && segments[i] == segments[j]
}

fn norm_rows(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> (Matrix, Vec<f64>, Matrix) {
    let mut xhat = Matrix::zeros(x.rows, x.cols);
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let (h, s) = normalize(x.row(r), eps);
        out.row_mut(r).copy_from_slice(&affine(&h, gain, bias));
        xhat.row_mut(r).copy_from_slice(&h);
        rstd.push(s);
    }
    (xhat, rstd, out)
}

fn layer_forward(
    p: &super::params::LayerParams,
    cfg: &ModelConfig,
    x: Matrix,
    segments: &[usize],
) -> LayerTrace {
    let t = x.rows;
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = cfg.d_head();
    let eps = cfg.norm_eps;

    let (attn_xhat, attn_rstd, attn_in) = norm_rows(&x, &p.attn_norm_gain, &p.attn_norm_bias, eps);
    let q_raw = matmul(&attn_in, &p.wq);
    let k_raw = matmul(&attn_in, &p.wk);
    let v = matmul(&attn_in, &p.wv);

    let mut q_hat = Matrix::zeros(t, d);
    let mut k_hat = Matrix::zeros(t, d);
    let mut q = Matrix::zeros(t, d);
    let mut k = Matrix::zeros(t, d);
    let mut q_rstd = Vec::with_capacity(t * nh);
    let mut k_rstd = Vec::with_capacity(t * nh);
    for pos in 0..t {
        for h in 0..nh {
            let cols = h * dh..(h + 1) * dh;
            let (qh, qs) = normalize(&q_raw.row(pos)[cols.clone()], eps);
            let (kh, ks) = normalize(&k_raw.row(pos)[cols.clone()], eps);
            let mut qv = affine(&qh, &p.q_norm_gain, &p.q_norm_bias);
            let mut kv = affine(&kh, &p.k_norm_gain, &p.k_norm_bias);
            rope_in_place(&mut qv, pos, cfg.rope_base);
            rope_in_place(&mut kv, pos, cfg.rope_base);
            q_hat.row_mut(pos)[cols.clone()].copy_from_slice(&qh);
            k_hat.row_mut(pos)[cols.clone()].copy_from_slice(&kh);
            q.row_mut(pos)[cols.clone()].copy_from_slice(&qv);
            k.row_mut(pos)[cols].copy_from_slice(&kv);
            q_rstd.push(qs);
            k_rstd.push(ks);
        }
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; nh * t * t];
    let mut context = Matrix::zeros(t, d);
    let mut max_logit = f64::NEG_INFINITY;
    let mut row_scores = vec![0.0; t];
    for h in 0..nh {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let qi = &q.row(i)[cols.clone()];
            let mut row_max = f64::NEG_INFINITY;
            for j in 0..=i {
                if allowed(segments, i, j) {
                    let s = scale * dot(qi, &k.row(j)[cols.clone()]);
                    row_scores[j] = s;
                    row_max = row_max.max(s);
                }
            }
            max_logit = max_logit.max(row_max);
            let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let mut z = 0.0;
            for j in 0..=i {
                if allowed(segments, i, j) {
                    prow[j] = (row_scores[j] - row_max).exp();
                    z += prow[j];
                }
            }
            let ctx = &mut context.row_mut(i)[cols.clone()];
            for j in 0..=i {
                if prow[j] != 0.0 {
                    prow[j] /= z;
                    for (c, vv) in ctx.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *c += prow[j] * vv;
                    }
                }
            }
        }
    }

    let attn_out = matmul(&context, &p.wo);
    let mut mid = x.clone();
    mid.data.iter_mut().zip(&attn_out.data).for_each(|(a, b)| *a += b);

    let (mlp_xhat, mlp_rstd, mlp_in) = norm_rows(&mid, &p.mlp_norm_gain, &p.mlp_norm_bias, eps);
    let mut hidden_pre = matmul(&mlp_in, &p.w1);
    for r in 0..t {
        hidden_pre.row_mut(r).iter_mut().zip(&p.b1).for_each(|(a, b)| *a += b);
    }
    let hidden = Matrix::from_vec(t, hidden_pre.cols, hidden_pre.data.iter().map(|&z| gelu(z)).collect());
    let down = matmul(&hidden, &p.w2);
    let mut output = mid.clone();
    for r in 0..t {
        output
            .row_mut(r)
            .iter_mut()
            .zip(down.row(r))
            .zip(&p.b2)
            .for_each(|((o, a), b)| *o += a + b);
    }

    LayerTrace {
        input: x,
        attn_xhat,
        attn_rstd,
        attn_in,
        q_raw,
        k_raw,
        v,
        q_hat,
        k_hat,
        q_rstd,
        k_rstd,
        q,
        k,
        probs,
        max_logit,
        context,
        mid,
        mlp_xhat,
        mlp_rstd,
        mlp_in,
        hidden_pre,
        hidden,
        output,
    }
}

/// Logits (positions × vocab) plus every activation needed for gradients.
///
/// `segment_ends` restricts attention to within each document when given.
pub fn forward_with_trace(
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[TokenId],
    segment_ends: Option<&[usize]>,
) -> Result<(Matrix, ForwardTrace), ModelError> {
    if tokens.len() > cfg.context_len {
        return Err(ModelError::LengthExceedsContext {
            len: tokens.len(),
            context_len: cfg.context_len,
        });
    }
    if tokens.is_empty() {
        return Err(ModelError::ShapeMismatch("empty token sequence".into()));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::IdOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    if params.layers.len() != cfg.n_layers || params.embedding.cols != cfg.d_model {
        return Err(ModelError::ShapeMismatch("parameters do not match config".into()));
    }
    let segments = segment_ids(ids.len(), segment_ends);
    let mut x = Matrix::zeros(ids.len(), cfg.d_model);
    for (r, &id) in ids.iter().enumerate() {
        x.row_mut(r).copy_from_slice(params.embedding.row(id));
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for p in &params.layers {
        let trace = layer_forward(p, cfg, x, &segments);
        x = trace.output.clone();
        layers.push(trace);
    }
    let (final_xhat, final_rstd, final_out) = norm_rows(&x, &params.final_norm_gain, &params.final_norm_bias, cfg.norm_eps);
    let logits = matmul_bt(&final_out, params.output_head());
    Ok((
        logits,
        ForwardTrace {
            tokens: ids,
            segments,
            layers,
            final_xhat,
            final_rstd,
            final_out,
        },
    ))
}

pub fn forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[TokenId],
    segment_ends: Option<&[usize]>,
) -> Result<Matrix, ModelError> {
    forward_with_trace(params, cfg, tokens, segment_ends).map(|(logits, _)| logits)
}

/// Softmax weights of one head as a (positions × positions) matrix.
pub fn attention_weights(trace: &ForwardTrace, layer: usize, head: usize) -> Matrix {
    let t = trace.tokens.len();
    let start = head * t * t;
    Matrix::from_vec(t, t, trace.layers[layer].probs[start..start + t * t].to_vec())
}
