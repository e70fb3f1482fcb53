use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;

use super::tensor::Matrix;
use super::{ModelConfig, ModelError};

/// Parameter class; decides initialization and weight-decay treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Linear,
    Bias,
    NormGain,
    NormBias,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Embedding | ParamKind::Linear)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm_gain: Vec<f64>,
    pub attn_norm_bias: Vec<f64>,
    /// d_model × d_model, applied as `x · W`.
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// Per-head query/key normalization, shared across heads (length d_head).
    pub q_norm_gain: Vec<f64>,
    pub q_norm_bias: Vec<f64>,
    pub k_norm_gain: Vec<f64>,
    pub k_norm_bias: Vec<f64>,
    pub mlp_norm_gain: Vec<f64>,
    pub mlp_norm_bias: Vec<f64>,
    /// Up-projection, d_model × d_hidden.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// Down-projection, d_hidden × d_model.
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// All trainable weights. Also used as the container for gradients and
/// optimizer moments, which share its shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// vocab × d_model.
    pub embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm_gain: Vec<f64>,
    pub final_norm_bias: Vec<f64>,
    /// Separate output head (vocab × d_model) when embeddings are untied.
    pub head: Option<Matrix>,
}

impl LayerParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let h = cfg.d_hidden();
        let dh = cfg.d_head();
        Self {
            attn_norm_gain: vec![0.0; d],
            attn_norm_bias: vec![0.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            q_norm_gain: vec![0.0; dh],
            q_norm_bias: vec![0.0; dh],
            k_norm_gain: vec![0.0; dh],
            k_norm_bias: vec![0.0; dh],
            mlp_norm_gain: vec![0.0; d],
            mlp_norm_bias: vec![0.0; d],
            w1: Matrix::zeros(d, h),
            b1: vec![0.0; h],
            w2: Matrix::zeros(h, d),
            b2: vec![0.0; d],
        }
    }

    fn tensors(&self) -> [(&'static str, ParamKind, &Vec<f64>); 16] {
        use ParamKind::*;
        [
            ("attn_norm.gain", NormGain, &self.attn_norm_gain),
            ("attn_norm.bias", NormBias, &self.attn_norm_bias),
            ("wq", Linear, &self.wq.data),
            ("wk", Linear, &self.wk.data),
            ("wv", Linear, &self.wv.data),
            ("wo", Linear, &self.wo.data),
            ("q_norm.gain", NormGain, &self.q_norm_gain),
            ("q_norm.bias", NormBias, &self.q_norm_bias),
            ("k_norm.gain", NormGain, &self.k_norm_gain),
            ("k_norm.bias", NormBias, &self.k_norm_bias),
            ("mlp_norm.gain", NormGain, &self.mlp_norm_gain),
            ("mlp_norm.bias", NormBias, &self.mlp_norm_bias),
            ("w1", Linear, &self.w1.data),
            ("b1", Bias, &self.b1),
            ("w2", Linear, &self.w2.data),
            ("b2", Bias, &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, ParamKind, &mut Vec<f64>); 16] {
        use ParamKind::*;
        [
            ("attn_norm.gain", NormGain, &mut self.attn_norm_gain),
            ("attn_norm.bias", NormBias, &mut self.attn_norm_bias),
            ("wq", Linear, &mut self.wq.data),
            ("wk", Linear, &mut self.wk.data),
            ("wv", Linear, &mut self.wv.data),
            ("wo", Linear, &mut self.wo.data),
            ("q_norm.gain", NormGain, &mut self.q_norm_gain),
            ("q_norm.bias", NormBias, &mut self.q_norm_bias),
            ("k_norm.gain", NormGain, &mut self.k_norm_gain),
            ("k_norm.bias", NormBias, &mut self.k_norm_bias),
            ("mlp_norm.gain", NormGain, &mut self.mlp_norm_gain),
            ("mlp_norm.bias", NormBias, &mut self.mlp_norm_bias),
            ("w1", Linear, &mut self.w1.data),
            ("b1", Bias, &mut self.b1),
            ("w2", Linear, &mut self.w2.data),
            ("b2", Bias, &mut self.b2),
        ]
    }
}

impl ModelParams {
    /// All-zero parameters shaped for `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            embedding: Matrix::zeros(cfg.vocab_size, cfg.d_model),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(cfg)).collect(),
            final_norm_gain: vec![0.0; cfg.d_model],
            final_norm_bias: vec![0.0; cfg.d_model],
            head: (!cfg.tie_embeddings).then(|| Matrix::zeros(cfg.vocab_size, cfg.d_model)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|_, _, t| t.iter_mut().for_each(|x| *x = 0.0));
        out
    }

    /// Output projection: the separate head, or the embedding when tied.
    pub fn output_head(&self) -> &Matrix {
        self.head.as_ref().unwrap_or(&self.embedding)
    }

    /// Visits every tensor in the fixed serialization order.
    pub fn for_each(&self, mut f: impl FnMut(&str, ParamKind, &[f64])) {
        f("embedding", ParamKind::Embedding, &self.embedding.data);
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, kind, t) in layer.tensors() {
                f(&format!("layers.{l}.{name}"), kind, t);
            }
        }
        f("final_norm.gain", ParamKind::NormGain, &self.final_norm_gain);
        f("final_norm.bias", ParamKind::NormBias, &self.final_norm_bias);
        if let Some(head) = &self.head {
            f("head", ParamKind::Linear, &head.data);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, ParamKind, &mut Vec<f64>)) {
        f("embedding", ParamKind::Embedding, &mut self.embedding.data);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, kind, t) in layer.tensors_mut() {
                f(&format!("layers.{l}.{name}"), kind, t);
            }
        }
        f("final_norm.gain", ParamKind::NormGain, &mut self.final_norm_gain);
        f("final_norm.bias", ParamKind::NormBias, &mut self.final_norm_bias);
        if let Some(head) = &mut self.head {
            f("head", ParamKind::Linear, &mut head.data);
        }
    }

    /// Flat views of every tensor, in serialization order.
    pub fn tensors(&self) -> Vec<(String, ParamKind, &[f64])> {
        let mut out: Vec<(String, ParamKind, &[f64])> = vec![("embedding".into(), ParamKind::Embedding, &self.embedding.data)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, kind, t) in layer.tensors() {
                out.push((format!("layers.{l}.{name}"), kind, t));
            }
        }
        out.push(("final_norm.gain".into(), ParamKind::NormGain, &self.final_norm_gain));
        out.push(("final_norm.bias".into(), ParamKind::NormBias, &self.final_norm_bias));
        if let Some(head) = &self.head {
            out.push(("head".into(), ParamKind::Linear, &head.data));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ParamKind, &mut Vec<f64>)> {
        let mut out: Vec<(String, ParamKind, &mut Vec<f64>)> =
            vec![("embedding".into(), ParamKind::Embedding, &mut self.embedding.data)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, kind, t) in layer.tensors_mut() {
                out.push((format!("layers.{l}.{name}"), kind, t));
            }
        }
        out.push(("final_norm.gain".into(), ParamKind::NormGain, &mut self.final_norm_gain));
        out.push(("final_norm.bias".into(), ParamKind::NormBias, &mut self.final_norm_bias));
        if let Some(head) = &mut self.head {
            out.push(("head".into(), ParamKind::Linear, &mut head.data));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, t| n += t.len());
        n
    }

    /// Sum of squares over every entry.
    pub fn sum_sq(&self) -> f64 {
        let mut s = 0.0;
        self.for_each(|_, _, t| s += super::tensor::sum_sq(t));
        s
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, _, t| ok &= t.iter().all(|x| x.is_finite()));
        ok
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|_, _, t| t.iter_mut().for_each(|x| *x *= factor));
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &ModelParams) {
        let src = other.tensors();
        for ((_, _, dst), (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += v;
            }
        }
    }

    /// Checks that every tensor has the size `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let expect = ModelParams::zeros(cfg);
        let a = self.tensors();
        let b = expect.tensors();
        if a.len() != b.len() {
            return Err(ModelError::ShapeMismatch(format!("{} tensors, expected {}", a.len(), b.len())));
        }
        for ((name, _, x), (_, _, y)) in a.iter().zip(&b) {
            if x.len() != y.len() {
                return Err(ModelError::ShapeMismatch(format!("{name}: {} entries, expected {}", x.len(), y.len())));
            }
        }
        Ok(())
    }
}

/// Draws weights from Normal(0, base_std²); the MLP up-projection is further
/// scaled by 1/√n_layers. Biases start at zero and norm gains at one.
pub fn init_params(cfg: &ModelConfig, base_std: f64, seed: u64) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    if !(base_std > 0.0) || !base_std.is_finite() {
        return Err(ModelError::BadConfig(format!("base_std must be positive, got {base_std}")));
    }
    let normal = Normal::new(0.0, base_std).map_err(|e| ModelError::BadConfig(e.to_string()))?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let up_scale = 1.0 / (cfg.n_layers as f64).sqrt();
    let mut params = ModelParams::zeros(cfg);
    params.for_each_mut(|name, kind, t| match kind {
        ParamKind::Embedding | ParamKind::Linear => {
            let scale = if name.ends_with(".w1") { up_scale } else { 1.0 };
            t.iter_mut().for_each(|x| *x = normal.sample(&mut rng) * scale);
        }
        ParamKind::NormGain => t.iter_mut().for_each(|x| *x = 1.0),
        ParamKind::Bias | ParamKind::NormBias => {}
    });
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_of(xs: &[f64]) -> f64 {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
    }

    #[test]
    fn up_projection_scaled_by_depth() {
        let cfg = ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 32,
            vocab_size: 16,
            ..ModelConfig::default()
        };
        let p = init_params(&cfg, 0.02, 7).unwrap();
        let w1: Vec<f64> = p.layers.iter().flat_map(|l| l.w1.data.iter().copied()).collect();
        assert!(w1.len() >= 100_000);
        let expected = 0.02 / 32f64.sqrt();
        assert!((std_of(&w1) / expected - 1.0).abs() < 0.05);
        let wq: Vec<f64> = p.layers.iter().flat_map(|l| l.wq.data.iter().copied()).collect();
        assert!((std_of(&wq) / 0.02 - 1.0).abs() < 0.05);
    }

    #[test]
    fn gains_one_biases_zero_and_deterministic() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            vocab_size: 32,
            ..ModelConfig::default()
        };
        let p = init_params(&cfg, 0.02, 3).unwrap();
        p.for_each(|name, kind, t| match kind {
            ParamKind::NormGain => assert!(t.iter().all(|&x| x == 1.0), "{name}"),
            ParamKind::Bias | ParamKind::NormBias => assert!(t.iter().all(|&x| x == 0.0), "{name}"),
            _ => {}
        });
        assert_eq!(p, init_params(&cfg, 0.02, 3).unwrap());
        assert_ne!(p, init_params(&cfg, 0.02, 4).unwrap());
        assert!(init_params(&cfg, 0.0, 3).is_err());
    }

    #[test]
    fn untied_head_and_names() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            vocab_size: 10,
            tie_embeddings: false,
            ..ModelConfig::default()
        };
        let p = init_params(&cfg, 0.1, 0).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|t| t.0).collect();
        assert_eq!(names.len(), 1 + 16 + 2 + 1);
        assert_eq!(names[3], "layers.0.wq");
        assert_eq!(names.last().unwrap(), "head");
        assert!(p.check_shapes(&cfg).is_ok());
        assert!(p.check_shapes(&ModelConfig { tie_embeddings: true, ..cfg }).is_err());
    }
}
