use serde::Serialize;

use super::TrainError;
use crate::model::{ForwardTrace, Matrix, ModelParams};

/// The five stability signals, one value per layer where applicable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Monitors {
    /// Largest pre-softmax attention logit over the batch, all heads and allowed pairs.
    pub max_attention_logits: Vec<f64>,
    /// Mean L2 norm of per-head queries after normalization and rotation.
    pub mean_query_norm: Vec<f64>,
    /// Mean of every output-head logit in the batch.
    pub output_logit_mean: f64,
    /// Root mean square of the up-projection weight gradient, before clipping.
    pub rms_grad_mlp1: Vec<f64>,
    /// Root mean square of the residual stream leaving each block.
    pub block_output_rms: Vec<f64>,
}

impl Monitors {
    pub fn all_finite(&self) -> bool {
        self.max_attention_logits
            .iter()
            .chain(&self.mean_query_norm)
            .chain(&self.rms_grad_mlp1)
            .chain(&self.block_output_rms)
            .chain(std::iter::once(&self.output_logit_mean))
            .all(|x| x.is_finite())
    }
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

/// Reads the monitor values off a batch's traces, logits and gradients.
pub fn collect_metrics(
    traces: &[ForwardTrace],
    grads: &ModelParams,
    logits: &[Matrix],
    n_heads: usize,
) -> Result<Monitors, TrainError> {
    let first = traces.first().ok_or(TrainError::TraceMissing)?;
    let n_layers = first.layers.len();
    let mut max_attention_logits = vec![f64::NEG_INFINITY; n_layers];
    let mut mean_query_norm = vec![0.0; n_layers];
    let mut block_output_rms = vec![0.0; n_layers];
    for l in 0..n_layers {
        let (mut qn_sum, mut qn_count) = (0.0, 0usize);
        for tr in traces {
            let layer = &tr.layers[l];
            max_attention_logits[l] = max_attention_logits[l].max(layer.max_logit);
            let dh = layer.q.cols / n_heads;
            for chunk in layer.q.data.chunks(dh) {
                qn_sum += chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
                qn_count += 1;
            }
        }
        mean_query_norm[l] = qn_sum / qn_count as f64;
        block_output_rms[l] = rms(traces.iter().flat_map(|t| t.layers[l].output.data.iter().copied()));
    }
    let (mut logit_sum, mut logit_count) = (0.0, 0usize);
    for m in logits {
        logit_sum += m.data.iter().sum::<f64>();
        logit_count += m.data.len();
    }
    Ok(Monitors {
        max_attention_logits,
        mean_query_norm,
        output_logit_mean: logit_sum / logit_count.max(1) as f64,
        rms_grad_mlp1: grads.layers.iter().map(|l| rms(l.w1.data.iter().copied())).collect(),
        block_output_rms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_with_trace, init_params, ModelConfig};

    #[test]
    fn single_token_self_logit() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 1,
            n_layers: 1,
            vocab_size: 10,
            ..ModelConfig::default()
        };
        let p = init_params(&cfg, 0.5, 2).unwrap();
        let (logits, trace) = forward_with_trace(&p, &cfg, &[4], None).unwrap();
        let layer = &trace.layers[0];
        let by_hand = layer.q.row(0).iter().zip(layer.k.row(0)).map(|(a, b)| a * b).sum::<f64>() / 8f64.sqrt();
        let m = collect_metrics(&[trace.clone()], &p.zeros_like(), &[logits], 1).unwrap();
        assert!((m.max_attention_logits[0] - by_hand).abs() < 1e-12);
        assert_eq!(m.rms_grad_mlp1, vec![0.0]);
        assert!(m.all_finite());
    }

    #[test]
    fn block_rms_of_ones() {
        assert_eq!(rms(std::iter::repeat(1.0).take(64)), 1.0);
        assert!(matches!(
            collect_metrics(&[], &ModelParams::zeros(&ModelConfig::default()), &[], 4),
            Err(TrainError::TraceMissing)
        ));
    }
}
