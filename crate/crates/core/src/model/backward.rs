use super::forward::{allowed, ForwardTrace, LayerTrace};
use super::ops::{gelu_grad, normalize_backward, rope_back_in_place};
use super::params::{LayerParams, ModelParams};
use super::tensor::{add_matmul_at, dot, matmul, matmul_bt, Matrix};
use super::{ModelConfig, ModelError};

/// Backward through `gain ⊙ xhat + bias` and the normalization, row by row.
/// Returns the input gradient and accumulates gain/bias gradients.
fn norm_rows_backward(
    dy: &Matrix,
    xhat: &Matrix,
    rstd: &[f64],
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Matrix {
    let mut dx = Matrix::zeros(dy.rows, dy.cols);
    let mut dxhat = vec![0.0; dy.cols];
    for r in 0..dy.rows {
        let (g, h) = (dy.row(r), xhat.row(r));
        for c in 0..dy.cols {
            dgain[c] += g[c] * h[c];
            dbias[c] += g[c];
            dxhat[c] = g[c] * gain[c];
        }
        normalize_backward(&dxhat, h, rstd[r], dx.row_mut(r));
    }
    dx
}

/// Transposed product `a · Wᵀ` for a weight stored as (in × out).
fn times_transpose(a: &Matrix, w: &Matrix) -> Matrix {
    matmul_bt(a, w)
}

fn layer_backward(
    p: &LayerParams,
    g: &mut LayerParams,
    cfg: &ModelConfig,
    tr: &LayerTrace,
    segments: &[usize],
    d_out: Matrix,
) -> Matrix {
    let t = d_out.rows;
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = cfg.d_head();

    // MLP branch
    add_matmul_at(&mut g.w2.data, &tr.hidden, &d_out);
    for r in 0..t {
        g.b2.iter_mut().zip(d_out.row(r)).for_each(|(a, b)| *a += b);
    }
    let mut d_hidden = times_transpose(&d_out, &p.w2);
    d_hidden
        .data
        .iter_mut()
        .zip(&tr.hidden_pre.data)
        .for_each(|(dz, &z)| *dz *= gelu_grad(z));
    add_matmul_at(&mut g.w1.data, &tr.mlp_in, &d_hidden);
    for r in 0..t {
        g.b1.iter_mut().zip(d_hidden.row(r)).for_each(|(a, b)| *a += b);
    }
    let d_mlp_in = times_transpose(&d_hidden, &p.w1);
    let d_mlp_x = norm_rows_backward(
        &d_mlp_in,
        &tr.mlp_xhat,
        &tr.mlp_rstd,
        &p.mlp_norm_gain,
        &mut g.mlp_norm_gain,
        &mut g.mlp_norm_bias,
    );
    let mut d_mid = d_out;
    d_mid.data.iter_mut().zip(&d_mlp_x.data).for_each(|(a, b)| *a += b);

    // attention branch
    add_matmul_at(&mut g.wo.data, &tr.context, &d_mid);
    let d_context = times_transpose(&d_mid, &p.wo);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(t, d);
    let mut dk = Matrix::zeros(t, d);
    let mut dv = Matrix::zeros(t, d);
    let mut dp = vec![0.0; t];
    for h in 0..nh {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let prow = &tr.probs[(h * t + i) * t..(h * t + i + 1) * t];
            let dctx = &d_context.row(i)[cols.clone()];
            let mut weighted = 0.0;
            for j in 0..=i {
                if allowed(segments, i, j) {
                    dp[j] = dot(dctx, &tr.v.row(j)[cols.clone()]);
                    weighted += prow[j] * dp[j];
                    for (a, b) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dctx) {
                        *a += prow[j] * b;
                    }
                }
            }
            for j in 0..=i {
                if !allowed(segments, i, j) {
                    continue;
                }
                let ds = prow[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for (a, b) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&tr.k.row(j)[cols.clone()]) {
                    *a += ds * b;
                }
                for (a, b) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&tr.q.row(i)[cols.clone()]) {
                    *a += ds * b;
                }
            }
        }
    }

    // undo rotation, then per-head normalization of queries and keys
    let mut dq_raw = Matrix::zeros(t, d);
    let mut dk_raw = Matrix::zeros(t, d);
    let mut buf = vec![0.0; dh];
    for pos in 0..t {
        for h in 0..nh {
            let cols = h * dh..(h + 1) * dh;
            for (grad, hat, rstd, gain, dgain, dbias, out) in [
                (&dq, &tr.q_hat, tr.q_rstd[pos * nh + h], &p.q_norm_gain, &mut g.q_norm_gain, &mut g.q_norm_bias, &mut dq_raw),
                (&dk, &tr.k_hat, tr.k_rstd[pos * nh + h], &p.k_norm_gain, &mut g.k_norm_gain, &mut g.k_norm_bias, &mut dk_raw),
            ] {
                let mut dn = grad.row(pos)[cols.clone()].to_vec();
                rope_back_in_place(&mut dn, pos, cfg.rope_base);
                let xhat = &hat.row(pos)[cols.clone()];
                for c in 0..dh {
                    dgain[c] += dn[c] * xhat[c];
                    dbias[c] += dn[c];
                    buf[c] = dn[c] * gain[c];
                }
                normalize_backward(&buf, xhat, rstd, &mut out.row_mut(pos)[cols.clone()]);
            }
        }
    }

    add_matmul_at(&mut g.wq.data, &tr.attn_in, &dq_raw);
    add_matmul_at(&mut g.wk.data, &tr.attn_in, &dk_raw);
    add_matmul_at(&mut g.wv.data, &tr.attn_in, &dv);
    let mut d_attn_in = times_transpose(&dq_raw, &p.wq);
    for m in [times_transpose(&dk_raw, &p.wk), times_transpose(&dv, &p.wv)] {
        d_attn_in.data.iter_mut().zip(&m.data).for_each(|(a, b)| *a += b);
    }
    let d_x = norm_rows_backward(
        &d_attn_in,
        &tr.attn_xhat,
        &tr.attn_rstd,
        &p.attn_norm_gain,
        &mut g.attn_norm_gain,
        &mut g.attn_norm_bias,
    );
    d_mid.data.iter_mut().zip(&d_x.data).for_each(|(a, b)| *a += b);
    d_mid
}

/// Accumulates into `grads` the gradient of a loss whose derivative w.r.t.
/// this trace's logits is `d_logits`.
pub(crate) fn backward_into(
    params: &ModelParams,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    d_logits: &Matrix,
    grads: &mut ModelParams,
) -> Result<(), ModelError> {
    let t = trace.tokens.len();
    if trace.layers.len() != params.layers.len()
        || d_logits.rows != t
        || d_logits.cols != cfg.vocab_size
        || trace.final_out.cols != cfg.d_model
    {
        return Err(ModelError::TraceMismatch(format!(
            "trace has {} layers over {t} positions, gradient is {}×{}",
            trace.layers.len(),
            d_logits.rows,
            d_logits.cols
        )));
    }
    // logits = final_out · headᵀ
    let d_final = matmul(d_logits, params.output_head());
    match &mut grads.head {
        Some(h) => add_matmul_at(&mut h.data, d_logits, &trace.final_out),
        None => add_matmul_at(&mut grads.embedding.data, d_logits, &trace.final_out),
    }
    let mut dx = norm_rows_backward(
        &d_final,
        &trace.final_xhat,
        &trace.final_rstd,
        &params.final_norm_gain,
        &mut grads.final_norm_gain,
        &mut grads.final_norm_bias,
    );
    for l in (0..params.layers.len()).rev() {
        dx = layer_backward(&params.layers[l], &mut grads.layers[l], cfg, &trace.layers[l], &trace.segments, dx);
    }
    for (r, &id) in trace.tokens.iter().enumerate() {
        grads.embedding.row_mut(id).iter_mut().zip(dx.row(r)).for_each(|(a, b)| *a += b);
    }
    Ok(())
}

/// Exact reverse-mode gradients for every parameter.
pub fn backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    d_logits: &Matrix,
) -> Result<ModelParams, ModelError> {
    let mut grads = params.zeros_like();
    backward_into(params, cfg, trace, d_logits, &mut grads)?;
    Ok(grads)
}
