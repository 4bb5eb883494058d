//! Linear warmup followed by cosine annealing.

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f32, warmup_steps: u64, total_steps: u64) -> Self {
        LrSchedule {
            base_lr,
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate at `step`; clamps past the end of the schedule.
    pub fn lr_at(&self, step: u64) -> f32 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.base_lr * step as f32 / self.warmup_steps as f32;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps);
        if decay == 0 {
            return self.base_lr;
        }
        let t = (step - self.warmup_steps) as f64 / decay as f64;
        self.base_lr * (0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_and_cosine_anchors() {
        let s = LrSchedule::new(1e-3, 100, 1100);
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(100), 1e-3);
        // midpoint of the cosine segment
        assert!((s.lr_at(600) - 5e-4).abs() < 1e-10);
        assert!(s.lr_at(1100).abs() < 1e-10);
        // clamps past the end
        assert_eq!(s.lr_at(5000), s.lr_at(1100));
    }

    #[test]
    fn monotone_on_each_segment() {
        let s = LrSchedule::new(0.5, 10, 50);
        for i in 0..10 {
            assert!(s.lr_at(i) <= s.lr_at(i + 1));
        }
        for i in 10..50 {
            assert!(s.lr_at(i) >= s.lr_at(i + 1));
        }
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let s = LrSchedule::new(1.0, 7, 19);
        let before = s.lr_at(6);
        let at = s.lr_at(7);
        assert!((at - 1.0).abs() < 1e-12);
        assert!(at - before < 1.0 / 7.0 + 1e-6);
    }

    #[test]
    fn zero_warmup_starts_at_base() {
        let s = LrSchedule::new(0.2, 0, 10);
        assert_eq!(s.lr_at(0), 0.2);
    }
}
