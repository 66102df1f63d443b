//! Top-level simulation configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::addrspace::MachineSpec;
use crate::cachehier::CacheConfig;
use crate::error::{Error, Result};
use crate::mmu::BackendConfig;
use crate::predictor::PredictorConfig;
use crate::simkit::GeneratorSpec;
use crate::tlbhier::TlbConfig;

/// Where a run's records come from. Exactly one of the two must be set
/// before a run, unless records are supplied directly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    pub path: Option<PathBuf>,
    pub generator: Option<GeneratorSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    /// Reach and occupancy sampling period.
    pub sample_instructions: u64,
    /// Timelines longer than this are thinned by striding.
    pub timeline_points: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            sample_instructions: 1000,
            timeline_points: 1000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    pub machine: MachineSpec,
    pub tlb: TlbConfig,
    pub cache: CacheConfig,
    pub predictor: PredictorConfig,
    pub backend: BackendConfig,
    pub trace: TraceConfig,
    pub stats: StatsConfig,
}

impl SimConfig {
    /// Checks every section without building anything.
    pub fn validate(&self) -> Result<()> {
        self.machine.validate()?;
        self.tlb.validate()?;
        self.cache.validate(&self.machine)?;
        self.predictor.validate()?;
        self.backend.validate()?;
        if let Some(g) = &self.trace.generator {
            g.validate()?;
        }
        if self.trace.path.is_some() && self.trace.generator.is_some() {
            return Err(Error::config("trace.path and trace.generator are mutually exclusive"));
        }
        if self.stats.sample_instructions == 0 {
            return Err(Error::config("stats.sample_instructions must be non-zero"));
        }
        if self.stats.timeline_points == 0 {
            return Err(Error::config("stats.timeline_points must be non-zero"));
        }
        Ok(())
    }

    /// Copy of this configuration with the inline generator's large-page
    /// fraction applied to the backend.
    pub fn effective(&self) -> SimConfig {
        let mut c = self.clone();
        if let Some(g) = &self.trace.generator {
            c.backend.large_page_fraction = g.large_page_fraction;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = SimConfig::default();
        c.validate().unwrap();
        let j = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<SimConfig>(&j).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = serde_json::from_str::<SimConfig>(r#"{"tlb": {"l2": {"entries": 1, "wayz": 2}}}"#).unwrap_err();
        assert!(e.to_string().contains("wayz"), "{e}");
    }

    #[test]
    fn conflicting_trace_sources() {
        let c = SimConfig {
            trace: TraceConfig {
                path: Some("x".into()),
                generator: Some(GeneratorSpec::default()),
            },
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
