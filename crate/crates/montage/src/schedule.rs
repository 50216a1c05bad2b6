//! Learning-rate schedule: linear warmup followed by cosine decay to zero.

use std::f64::consts::PI;

/// Warmup/decay shape of the schedule, independent of batch scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub total_iters: u64,
    pub warmup_iters: u64,
    pub lr_start: f64,
    pub lr_peak: f64,
}

impl LrSchedule {
    /// Learning rate at iteration `iter` (0-based).
    ///
    /// Warmup is linear from `lr_start` at iteration 0 to `lr_peak` at
    /// iteration `warmup_iters`; from there the rate follows a half cosine
    /// down to exactly zero at `total_iters`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        let t = iter.min(self.total_iters) as f64;
        let w = self.warmup_iters as f64;
        if iter < self.warmup_iters {
            self.lr_start + (self.lr_peak - self.lr_start) * t / w
        } else {
            let span = (self.total_iters - self.warmup_iters).max(1) as f64;
            self.lr_peak * 0.5 * (1.0 + (PI * (t - w) / span).cos())
        }
    }
}
