//! Clamped linear depth laws used for every depth-adaptive threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("depth must be non-negative, got {0}")]
pub struct NegativeDepth(pub f64);

/// `clamp(intercept + slope * z, min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthLaw {
    pub intercept: f64,
    pub slope: f64,
    pub min: f64,
    pub max: f64,
}

impl DepthLaw {
    pub const fn new(intercept: f64, slope: f64, min: f64, max: f64) -> Self {
        Self { intercept, slope, min, max }
    }

    /// A law that ignores depth.
    pub const fn constant(value: f64) -> Self {
        Self::new(value, 0.0, value, value)
    }

    pub fn eval(&self, z: f64) -> Result<f64, NegativeDepth> {
        if !(z >= 0.0) {
            return Err(NegativeDepth(z));
        }
        Ok((self.intercept + self.slope * z).clamp(self.min, self.max))
    }

    pub fn is_valid(&self) -> bool {
        self.intercept.is_finite()
            && self.slope.is_finite()
            && self.min.is_finite()
            && self.max.is_finite()
            && self.min <= self.max
    }
}

/// Semantic impact factor, increasing with depth over [0.05, 0.25].
pub const BETA: DepthLaw = DepthLaw::new(0.05, 0.02, 0.05, 0.25);
/// Epipolar error threshold in px, decreasing with depth over [0.5, 0.9].
pub const ALPHA: DepthLaw = DepthLaw::new(0.9, -0.04, 0.5, 0.9);
/// Neighbourhood radius in px for interaction support, `48 - 4 z` over [11, 48].
pub const DELTA: DepthLaw = DepthLaw::new(48.0, -4.0, 11.0, 48.0);
/// Centroid distance threshold in px, decreasing with depth over [10, 28].
pub const GAMMA: DepthLaw = DepthLaw::new(28.0, -1.8, 10.0, 28.0);
