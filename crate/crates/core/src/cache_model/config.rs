use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RANK: usize = 32;
pub const DEFAULT_TAU: f64 = 3.5;
pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_OMEGA: usize = 8;
pub const DEFAULT_POOL_KERNEL: usize = 7;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Knobs for one compression run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    /// Fraction of prompt tokens kept per head, in `(0, 1]`.
    pub gamma: f64,
    /// Weight on spatial saliency.
    pub alpha: f64,
    /// Softmax temperature for saliency.
    pub tau: f64,
    /// Rank of the current-frame key basis.
    pub rank_r: usize,
    /// Overrides the layout's observation window when set.
    pub omega: Option<usize>,
    /// Max-pool width over visual tokens; `None` disables pooling.
    pub pool_kernel: Option<usize>,
    pub epsilon: f64,
}

impl CompressionConfig {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            rank_r: DEFAULT_RANK,
            omega: None,
            pool_kernel: Some(DEFAULT_POOL_KERNEL),
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::param("gamma", "budget must be in (0,1]"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::param("alpha", "must be finite and >= 0"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::param("tau", "must be finite and > 0"));
        }
        if self.rank_r == 0 {
            return Err(Error::param("rank_r", "must be >= 1"));
        }
        if self.omega == Some(0) {
            return Err(Error::param("omega", "must be >= 1"));
        }
        if let Some(k) = self.pool_kernel {
            if k % 2 == 0 {
                return Err(Error::param("pool_kernel", "must be odd"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param("epsilon", "must be > 0"));
        }
        Ok(())
    }
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self::new(0.2)
    }
}
