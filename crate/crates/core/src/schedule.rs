/// Learning rates for the two parameter groups at a given step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub adapter: f64,
    pub refiner: f64,
}

/// Constant adapter rate; the heatmap refiner decays by `decay` every
/// `decay_every` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub decay_every: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base: 0.01, decay: 0.999, decay_every: 40 }
    }
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> GroupRates {
        let k = (step / self.decay_every.max(1)) as f64;
        GroupRates { adapter: self.base, refiner: self.base * libm::pow(self.decay, k) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refiner_decay_steps() {
        let s = LrSchedule::default();
        assert_eq!(s.at(0), GroupRates { adapter: 0.01, refiner: 0.01 });
        assert_eq!(s.at(39).refiner, 0.01);
        assert!((s.at(40).refiner - 0.00999).abs() < 1e-15);
        assert!((s.at(4000).refiner - 0.01 * 0.999f64.powi(100)).abs() < 1e-15);
        assert!((s.at(4000).refiner - 0.009048).abs() < 1e-6);
        assert_eq!(s.at(4000).adapter, 0.01);
    }
}
