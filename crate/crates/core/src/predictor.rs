//! Comparator-based walk-cost predictor: a page is costly to translate when
//! its (frequency, cost) counters fall inside a fixed box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pagetable::{PTW_COST_MAX, PTW_FREQ_MAX};

/// Inclusive box over the two walk counters. Defaults to frequency 1..=7
/// and cost 1..=12.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorBox {
    pub freq_lo: u8,
    pub freq_hi: u8,
    pub cost_lo: u8,
    pub cost_hi: u8,
}

impl Default for PredictorBox {
    fn default() -> Self {
        Self {
            freq_lo: 1,
            freq_hi: 7,
            cost_lo: 1,
            cost_hi: 12,
        }
    }
}

impl PredictorBox {
    pub fn validate(&self) -> Result<()> {
        if self.freq_lo > self.freq_hi || self.cost_lo > self.cost_hi {
            return Err(Error::config("predictor box has lo > hi"));
        }
        if self.freq_hi > PTW_FREQ_MAX || self.cost_hi > PTW_COST_MAX {
            return Err(Error::config(format!(
                "predictor box exceeds counter range (freq <= {PTW_FREQ_MAX}, cost <= {PTW_COST_MAX})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    #[serde(rename = "box")]
    pub bounds: PredictorBox,
    /// At or above this L2-cache MPKI the predictor is bypassed and every
    /// candidate is inserted.
    pub l2_cache_mpki_threshold: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            bounds: PredictorBox::default(),
            l2_cache_mpki_threshold: 5.0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.l2_cache_mpki_threshold.is_nan() || self.l2_cache_mpki_threshold < 0.0 {
            return Err(Error::config("predictor.l2_cache_mpki_threshold must be >= 0"));
        }
        Ok(())
    }
}

/// Four comparisons.
pub fn predict(freq: u8, cost: u8, b: &PredictorBox) -> bool {
    debug_assert!(freq <= PTW_FREQ_MAX && cost <= PTW_COST_MAX);
    b.cost_lo <= cost && cost <= b.cost_hi && b.freq_lo <= freq && freq <= b.freq_hi
}

/// Whether to insert a TLB block for a page with the given counters.
pub fn consult(l2_cache_mpki: f64, freq: u8, cost: u8, cfg: &PredictorConfig) -> bool {
    l2_cache_mpki >= cfg.l2_cache_mpki_threshold || predict(freq, cost, &cfg.bounds)
}
