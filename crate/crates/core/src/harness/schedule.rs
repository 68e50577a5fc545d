//! Learning-rate schedules.

use std::f64::consts::PI;

/// Linear warmup from 0 to `peak` over `warmup` steps, cosine decay to
/// `floor` at `total`, constant afterwards. `step` is zero-based.
pub fn warmup_cosine(step: usize, warmup: usize, total: usize, peak: f64, floor: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total || total <= warmup {
        return floor;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    floor + 0.5 * (peak - floor) * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub warmup: usize,
    pub total: usize,
    pub peak: f64,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { warmup: 1000, total: 5000, peak: 2.5e-5, floor: 2.5e-6 }
    }
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        warmup_cosine(step, self.warmup, self.total, self.peak, self.floor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = LrSchedule::default();
        assert_eq!(s.at(0), 0.0);
        assert!((s.at(999) - 2.5e-5 * 0.999).abs() < 1e-18);
        assert!((s.at(1000) - 2.5e-5).abs() < 1e-18);
        assert!((s.at(5000) - 2.5e-6).abs() < 1e-18);
        assert!((s.at(9000) - 2.5e-6).abs() < 1e-18);
        let mid = s.at(3000);
        assert!((mid - (2.5e-6 + 0.5 * 2.25e-5)).abs() < 1e-12);
    }

    #[test]
    fn monotone_phases() {
        let s = LrSchedule::default();
        for t in 1..=1000 {
            assert!(s.at(t) > s.at(t - 1));
        }
        for t in 1001..5000 {
            assert!(s.at(t) <= s.at(t - 1));
        }
    }
}
