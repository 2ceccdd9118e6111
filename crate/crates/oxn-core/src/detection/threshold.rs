//! The built-in threshold detector: fit mean and standard deviation on the
//! baseline, flag rows deviating by more than z standard deviations.

use super::{DetectionError, Detector, MIN_BASELINE_ROWS};

/// Floor for the fitted standard deviation: constant baselines flag any
/// deviation while equal values never flag.
pub const SIGMA_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct ThresholdDetector {
    z: f64,
    mu: f64,
    sigma: f64,
    fitted: bool,
}

impl ThresholdDetector {
    pub fn new(z: f64) -> ThresholdDetector {
        ThresholdDetector {
            z,
            mu: 0.0,
            sigma: SIGMA_FLOOR,
            fitted: false,
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

impl Detector for ThresholdDetector {
    fn fit(&mut self, baseline: &[f64]) -> Result<(), DetectionError> {
        if baseline.len() < MIN_BASELINE_ROWS {
            return Err(DetectionError::InsufficientBaseline {
                have: baseline.len(),
                need: MIN_BASELINE_ROWS,
            });
        }
        let n = baseline.len() as f64;
        self.mu = baseline.iter().sum::<f64>() / n;
        let variance = baseline.iter().map(|v| (v - self.mu).powi(2)).sum::<f64>() / n;
        self.sigma = variance.sqrt().max(SIGMA_FLOOR);
        self.fitted = true;
        Ok(())
    }

    fn score(&self, value: f64) -> bool {
        debug_assert!(self.fitted, "score before fit");
        (value - self.mu).abs() > self.z * self.sigma
    }
}
