use serde::Serialize;

use super::tensor::Matrix;
use super::{LossConfig, ModelError, RegularizerMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean cross-entropy over unmasked targets.
    pub ce: f64,
    /// Active regularizer term, coefficient included.
    pub regularizer: f64,
    /// Mean over positions of the squared max logit, before the coefficient.
    pub max_z_sq: f64,
    /// Mean over positions of the squared log-partition, before the coefficient.
    pub log_z_sq: f64,
    pub targets: usize,
    pub positions: usize,
}

fn check(logits: &Matrix, targets: &[i64]) -> Result<usize, ModelError> {
    if logits.rows != targets.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} logit rows for {} targets",
            logits.rows,
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols as i64) {
        return Err(ModelError::IdOutOfRange {
            id: t as usize,
            vocab_size: logits.cols,
        });
    }
    match targets.iter().filter(|&&t| t >= 0).count() {
        0 => Err(ModelError::AllMasked),
        n => Ok(n),
    }
}

/// Index and value of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

fn log_sum_exp(row: &[f64], max: f64) -> f64 {
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy over targets `>= 0` plus the configured logit regularizer,
/// averaged over every position.
pub fn compute_loss(logits: &Matrix, targets: &[i64], cfg: &LossConfig) -> Result<LossBreakdown, ModelError> {
    let n_targets = check(logits, targets)?;
    let mut ce = 0.0;
    let mut max_z_sq = 0.0;
    let mut log_z_sq = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let (_, m) = argmax(row);
        let lse = log_sum_exp(row, m);
        if t >= 0 {
            ce += lse - row[t as usize];
        }
        max_z_sq += m * m;
        log_z_sq += lse * lse;
    }
    let positions = targets.len();
    let ce = ce / n_targets as f64;
    let max_z_sq = max_z_sq / positions as f64;
    let log_z_sq = log_z_sq / positions as f64;
    let regularizer = match cfg.mode {
        RegularizerMode::Maxz => cfg.maxz_coeff * max_z_sq,
        RegularizerMode::Auxz => cfg.auxz_coeff * log_z_sq,
        RegularizerMode::None => 0.0,
    };
    Ok(LossBreakdown {
        total: ce + regularizer,
        ce,
        regularizer,
        max_z_sq,
        log_z_sq,
        targets: n_targets,
        positions,
    })
}

/// Gradient of [`compute_loss`]'s total w.r.t. the logits. The max-logit term
/// sends its gradient to the lowest-index maximum.
pub fn loss_gradient(logits: &Matrix, targets: &[i64], cfg: &LossConfig) -> Result<Matrix, ModelError> {
    let n_targets = check(logits, targets)? as f64;
    let positions = targets.len() as f64;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let (am, m) = argmax(row);
        let lse = log_sum_exp(row, m);
        let g = grad.row_mut(r);
        let mut softmax_weight = 0.0;
        if t >= 0 {
            softmax_weight += 1.0 / n_targets;
            g[t as usize] -= 1.0 / n_targets;
        }
        match cfg.mode {
            RegularizerMode::Maxz => g[am] += 2.0 * cfg.maxz_coeff * m / positions,
            RegularizerMode::Auxz => softmax_weight += 2.0 * cfg.auxz_coeff * lse / positions,
            RegularizerMode::None => {}
        }
        if softmax_weight != 0.0 {
            for (gv, &x) in g.iter_mut().zip(row) {
                *gv += softmax_weight * (x - lse).exp();
            }
        }
    }
    Ok(grad)
}
