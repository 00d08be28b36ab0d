//! Scalar reference forms of the loss arithmetic. The differentiable versions
//! live with the tracker; these are used for reporting and as test oracles.

/// Huber penalty on the Euclidean distance `r` with transition `delta`.
pub fn huber(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub dino_bb: f64,
    pub rfn_bb: f64,
    pub rfn_cc: f64,
    pub prior: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Huber transition in normalized coordinates.
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dino_bb: 25e-5, rfn_bb: 5e-5, rfn_cc: 0.5, prior: 1e-4, tau: 0.1, huber_delta: 1.0 }
    }
}

/// Values of the five objective terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossTerms {
    pub flow: f64,
    pub dino_bb: f64,
    pub rfn_bb: f64,
    pub rfn_cc: f64,
    pub prior: f64,
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        let all = [self.dino_bb, self.rfn_bb, self.rfn_cc, self.prior, self.tau, self.huber_delta];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(crate::Error::input("loss weights, temperature and Huber delta must be positive"))
        }
    }

    /// `flow + l1 dino_bb + l2 rfn_bb + l3 rfn_cc + l4 prior`, summed in that order.
    pub fn total(&self, t: &LossTerms) -> f64 {
        t.flow + self.dino_bb * t.dino_bb + self.rfn_bb * t.rfn_bb + self.rfn_cc * t.rfn_cc + self.prior * t.prior
    }
}
