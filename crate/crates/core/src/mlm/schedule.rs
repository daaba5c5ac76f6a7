use serde::{Deserialize, Serialize};

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to
/// 0 at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub total: u64,
    pub warmup: u64,
    pub peak: f64,
}

impl LinearSchedule {
    /// Warmup over the first 1% of steps, rounded up.
    pub fn one_percent_warmup(total: u64, peak: f64) -> Self {
        Self {
            total,
            warmup: warmup_steps(total),
            peak,
        }
    }

    pub fn with_warmup_fraction(total: u64, fraction: f64, peak: f64) -> Self {
        Self {
            total,
            warmup: ((total as f64 * fraction).ceil() as u64).min(total),
            peak,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if step >= self.total {
            return 0.0;
        }
        if step <= self.warmup {
            if self.warmup == 0 {
                return self.peak;
            }
            return self.peak * (step as f64 / self.warmup as f64);
        }
        self.peak * ((self.total - step) as f64 / (self.total - self.warmup) as f64)
    }
}

/// `⌈0.01 · total⌉`
pub fn warmup_steps(total: u64) -> u64 {
    total.div_ceil(100)
}

pub fn lr_at(step: u64, total: u64, peak: f64) -> f64 {
    LinearSchedule::one_percent_warmup(total, peak).at(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_model_peak() {
        assert_eq!(warmup_steps(500_000), 5000);
        assert_eq!(lr_at(5000, 500_000, 1e-4), 1e-4);
        assert_eq!(lr_at(0, 500_000, 1e-4), 0.0);
        assert_eq!(lr_at(500_000, 500_000, 1e-4), 0.0);
    }

    #[test]
    fn rounding_up() {
        assert_eq!(warmup_steps(150), 2);
        assert_eq!(warmup_steps(100), 1);
        assert_eq!(warmup_steps(1), 1);
        assert_eq!(warmup_steps(0), 0);
        assert_eq!(lr_at(0, 0, 1e-4), 0.0);
    }

    #[test]
    fn halfway_points() {
        let total = 1000;
        assert!((lr_at(5, total, 1.0) - 0.5).abs() < 1e-15);
        let mid = 10 + (total - 10) / 2;
        assert!((lr_at(mid, total, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_warmup_fraction_starts_at_peak() {
        let s = LinearSchedule::with_warmup_fraction(10, 0.0, 2.0);
        assert_eq!(s.at(0), 2.0);
        assert_eq!(s.at(5), 1.0);
    }
}
