//! Optimizer hyperparameters and the warmup + half-cosine learning-rate
//! schedule shared by all classification tasks.

use serde::{Deserialize, Serialize};

/// Which update rule a training loop uses. The classification recipe defaults
/// to momentum SGD; the detector and from-scratch overfitting runs want the
/// adaptive rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Only meaningful for `OptimKind::Sgd`.
    pub momentum: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::Sgd,
            base_lr: 0.0125,
            weight_decay: 1e-4,
            momentum: 0.9,
            epochs: 30,
            warmup_epochs: 5,
            batch_size: 4,
        }
    }
}

impl OptimConfig {
    /// Detector defaults: the adaptive optimizer wants a much smaller base
    /// rate than the momentum-SGD classification recipe; schedule shape and
    /// decay are shared.
    pub fn detector_default() -> Self {
        Self {
            kind: OptimKind::AdamW,
            base_lr: 1e-4,
            ..Self::default()
        }
    }


    /// Learning rate at training progress `p ∈ [0, 1]`: linear ramp from 0
    /// over the warmup fraction, then half-cosine decay to exactly 0 at the
    /// end.
    pub fn lr_at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        let w = self.warmup_epochs as f64 / self.epochs as f64;
        if p < w {
            self.base_lr * p / w
        } else if w >= 1.0 {
            self.base_lr
        } else {
            let t = (p - w) / (1.0 - w);
            self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OptimConfig {
        OptimConfig::default()
    }

    #[test]
    fn starts_at_zero_peaks_at_warmup_end_ends_at_zero() {
        let c = cfg();
        assert_eq!(c.lr_at(0.0), 0.0);
        let w = 5.0 / 30.0;
        assert!((c.lr_at(w) - 0.0125).abs() < 1e-15);
        assert!(c.lr_at(1.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_is_linear() {
        let c = cfg();
        let w = 5.0 / 30.0;
        for i in 1..10 {
            let p = w * i as f64 / 10.0;
            assert!((c.lr_at(p) - 0.0125 * (i as f64 / 10.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_midpoint_is_half_base() {
        let c = cfg();
        let w = 5.0 / 30.0;
        let mid = (1.0 + w) / 2.0;
        assert!((c.lr_at(mid) - 0.0125 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let c = cfg();
        let w = 5.0 / 30.0;
        let before = c.lr_at(w - 1e-9);
        let after = c.lr_at(w + 1e-9);
        assert!((before - after).abs() < 1e-6);
    }

    #[test]
    fn monotone_decreasing_after_warmup() {
        let c = cfg();
        let w = 5.0 / 30.0;
        let mut prev = c.lr_at(w);
        for i in 1..=100 {
            let p = w + (1.0 - w) * i as f64 / 100.0;
            let lr = c.lr_at(p);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn zero_warmup_starts_at_base() {
        let c = OptimConfig { warmup_epochs: 0, ..cfg() };
        assert!((c.lr_at(0.0) - c.base_lr).abs() < 1e-15);
        assert!(c.lr_at(1.0).abs() < 1e-12);
    }
}
