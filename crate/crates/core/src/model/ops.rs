use super::ModelError;

/// Normalized vector and reciprocal standard deviation, before gain and bias.
pub(crate) fn normalize(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * rstd).collect(), rstd)
}

/// `gain ⊙ (x − mean)/√(var + eps) + bias`
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let (xhat, _) = normalize(x, eps);
    affine(&xhat, gain, bias)
}

pub(crate) fn affine(xhat: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    xhat.iter().zip(gain).zip(bias).map(|((x, g), b)| x * g + b).collect()
}

/// Gradient w.r.t. the input of a layer norm, given the gradient w.r.t.
/// the normalized vector `xhat` (i.e. after multiplying by the gain).
pub(crate) fn normalize_backward(dxhat: &[f64], xhat: &[f64], rstd: f64, dx: &mut [f64]) {
    let n = xhat.len() as f64;
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / n;
    for ((o, d), x) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o += rstd * (d - mean_d - x * mean_dx);
    }
}

fn rotate(v: &mut [f64], position: f64, base: f64, sign: f64) {
    let d = v.len();
    for i in 0..d / 2 {
        let theta = base.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = (sign * position * theta).sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// Rotates each coordinate pair `(2i, 2i+1)` by `position · base^(−2i/d)`.
pub fn rope_apply(v: &[f64], position: f64, base: f64) -> Result<Vec<f64>, ModelError> {
    if v.len() % 2 != 0 {
        return Err(ModelError::OddHeadDim(v.len()));
    }
    let mut out = v.to_vec();
    rotate(&mut out, position, base, 1.0);
    Ok(out)
}

/// Inverse rotation of [`rope_apply`]; also its transpose.
pub fn rope_unapply(v: &[f64], position: f64, base: f64) -> Result<Vec<f64>, ModelError> {
    if v.len() % 2 != 0 {
        return Err(ModelError::OddHeadDim(v.len()));
    }
    let mut out = v.to_vec();
    rotate(&mut out, position, base, -1.0);
    Ok(out)
}

pub(crate) fn rope_in_place(v: &mut [f64], position: usize, base: f64) {
    rotate(v, position as f64, base, 1.0);
}

pub(crate) fn rope_back_in_place(v: &mut [f64], position: usize, base: f64) {
    rotate(v, position as f64, base, -1.0);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
