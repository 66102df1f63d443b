//! Simulator of address translation with TLB entries cached in the L2 data
//! cache, alongside radix, enlarged-TLB, POM-TLB and virtualized baselines.

pub mod addrspace;
pub mod cachehier;
pub mod config;
pub mod error;
pub mod mmu;
pub mod pagetable;
pub mod predictor;
pub mod simkit;
pub mod tlbhier;

pub use addrspace::{Asid, MachineSpec, PageSize, PhysAddr, VirtAddr};
pub use cachehier::{CacheConfig, CacheHierarchy};
pub use config::{SimConfig, StatsConfig, TraceConfig};
pub use error::{Error, Result};
pub use mmu::{Backend, BackendConfig, MaintenanceCmd, Mmu, MmuCounters, Resolution, TranslationResult};
pub use predictor::{PredictorBox, PredictorConfig};
pub use simkit::{run, run_batch, run_config, GeneratorKind, GeneratorSpec, Stats, TraceInput, TraceRecord};
pub use tlbhier::{AccessKind, TlbConfig};
