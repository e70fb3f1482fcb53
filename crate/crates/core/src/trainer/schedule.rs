use std::f64::consts::PI;

use super::OptimConfig;

/// Linear warmup from 0 to `max_lr`, then cosine decay to
/// `final_lr_ratio · max_lr` at `total_steps`, flat afterwards.
pub fn cosine_lr(step: u64, cfg: &OptimConfig) -> f64 {
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return cfg.max_lr;
        }
        return cfg.max_lr * (step as f64 / cfg.warmup_steps as f64);
    }
    let floor = lr_floor(cfg);
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let p = ((step - cfg.warmup_steps) as f64 / span).clamp(0.0, 1.0);
    floor + (cfg.max_lr - floor) * (1.0 + (PI * p).cos()) / 2.0
}

/// `max_lr · final_lr_ratio` rounded to 12 significant digits, so decimal
/// settings land on the decimal floor: 3e-4 at ratio 0.1 gives exactly 3e-5.
pub fn lr_floor(cfg: &OptimConfig) -> f64 {
    let raw = cfg.max_lr * cfg.final_lr_ratio;
    if raw == 0.0 || !raw.is_finite() {
        return raw;
    }
    format!("{raw:.11e}").parse().unwrap_or(raw)
}
