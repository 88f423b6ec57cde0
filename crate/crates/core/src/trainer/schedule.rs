//! Learning-rate, teacher-momentum, and distillation-weight schedules.

use std::f64::consts::PI;

use crate::config::{LrSchedule, TrainConfig};

/// Linear warmup from 0 to `lr` over `warmup_iters`, then cosine or
/// polynomial decay to `min_lr` at `iterations`.
pub fn lr_at(t: usize, cfg: &TrainConfig) -> f64 {
    let (base, floor) = (cfg.lr, cfg.min_lr);
    if t < cfg.warmup_iters {
        return base * t as f64 / cfg.warmup_iters as f64;
    }
    let span = cfg.iterations.saturating_sub(cfg.warmup_iters);
    if span == 0 {
        return base;
    }
    let p = ((t - cfg.warmup_iters) as f64 / span as f64).min(1.0);
    match cfg.lr_schedule {
        LrSchedule::Cosine => floor + (base - floor) * 0.5 * (1.0 + (PI * p).cos()),
        LrSchedule::Polynomial => floor + (base - floor) * (1.0 - p).powf(cfg.poly_power),
    }
}

/// Cosine ramp of the head momentum from `proj_momentum_start` (t = 0) to
/// `proj_momentum_end` (t = iterations).
pub fn momentum_at(t: usize, cfg: &TrainConfig) -> f64 {
    let p = (t as f64 / cfg.iterations as f64).min(1.0);
    let (a, b) = (cfg.proj_momentum_start, cfg.proj_momentum_end);
    b - (b - a) * 0.5 * (1.0 + (PI * p).cos())
}

/// Loss weights at step `t`; with `decay_distill_weights` the last two
/// follow a cosine from their configured value down to zero.
pub fn lambdas_at(t: usize, cfg: &TrainConfig) -> [f64; 5] {
    let mut l = cfg.lambdas();
    if cfg.decay_distill_weights {
        let p = (t as f64 / cfg.iterations as f64).min(1.0);
        let f = 0.5 * (1.0 + (PI * p).cos());
        l[3] *= f;
        l[4] *= f;
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            iterations: 3000,
            warmup_iters: 1500,
            lr: 6e-5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn warmup_and_cosine_endpoints() {
        let c = cfg();
        assert_eq!(lr_at(0, &c), 0.0);
        assert!((lr_at(750, &c) - 3e-5).abs() < 1e-18);
        assert_eq!(lr_at(1500, &c), 6e-5);
        assert!(lr_at(3000, &c).abs() < 1e-20);
        assert!((lr_at(2250, &c) - 3e-5).abs() < 1e-18);
    }

    #[test]
    fn polynomial_decay() {
        let c = TrainConfig {
            lr_schedule: LrSchedule::Polynomial,
            ..cfg()
        };
        assert_eq!(lr_at(1500, &c), 6e-5);
        assert_eq!(lr_at(3000, &c), 0.0);
        assert!((lr_at(2250, &c) - 6e-5 * 0.5f64.powf(0.9)).abs() < 1e-18);
    }

    #[test]
    fn momentum_ramp() {
        let c = cfg();
        assert!((momentum_at(0, &c) - 0.996).abs() < 1e-15);
        assert!((momentum_at(1500, &c) - 0.998).abs() < 1e-15);
        assert!((momentum_at(3000, &c) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn distillation_weight_decay() {
        let c = cfg();
        assert_eq!(lambdas_at(2000, &c), [1.0, 0.2, 0.1, 0.1, 0.1]);
        let d = TrainConfig {
            decay_distill_weights: true,
            ..cfg()
        };
        assert_eq!(lambdas_at(0, &d), [1.0, 0.2, 0.1, 0.1, 0.1]);
        let end = lambdas_at(3000, &d);
        assert_eq!(&end[..3], &[1.0, 0.2, 0.1]);
        assert!(end[3].abs() < 1e-17 && end[4].abs() < 1e-17);
    }
}
