//! Software-managed TLB table resident in simulated physical memory. Every
//! lookup and fill is a physical access through the cache hierarchy.

use serde::{Deserialize, Serialize};

use crate::addrspace::{Asid, PageSize, PhysAddr, VirtAddr};
use crate::cachehier::CacheHierarchy;
use crate::error::Result;
use crate::pagetable::{MemoryPort, POM_TLB_BASE};
use crate::tlbhier::{InvalidationScope, SetAssocTlb, TlbArrayConfig, TlbEntry};

pub const POM_ENTRY_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PomTlbConfig {
    pub entries: usize,
    pub ways: usize,
}

impl Default for PomTlbConfig {
    fn default() -> Self {
        Self {
            entries: 64 << 10,
            ways: 16,
        }
    }
}

impl PomTlbConfig {
    pub fn validate(&self) -> Result<()> {
        TlbArrayConfig::new(self.entries, self.ways, 0).validate("backend.pom_tlb")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PomLookup {
    pub entry: Option<TlbEntry>,
    pub cycles: u32,
}

/// Contents are held in a set-associative array indexed by VPN modulo the
/// set count; timing comes from reading the set's lines at
/// `POM_TLB_BASE + set * ways * 8`.
#[derive(Debug, Clone)]
pub struct PomTlb {
    table: SetAssocTlb,
    set_bytes: u64,
    pub hits: u64,
    pub misses: u64,
}

impl PomTlb {
    pub fn new(cfg: &PomTlbConfig) -> Self {
        Self {
            table: SetAssocTlb::new(&TlbArrayConfig::new(cfg.entries, cfg.ways, 0), &PageSize::ALL),
            set_bytes: cfg.ways as u64 * POM_ENTRY_BYTES,
            hits: 0,
            misses: 0,
        }
    }

    pub fn set_address(&self, vpn: u64) -> PhysAddr {
        let set = vpn % self.table.sets() as u64;
        PhysAddr(POM_TLB_BASE + set * self.set_bytes)
    }

    /// Probes both page-size hypotheses in parallel. Each reads every line
    /// of its set; the lookup costs the slowest of those reads.
    pub fn lookup(&mut self, va: VirtAddr, asid: Asid, caches: &mut CacheHierarchy) -> PomLookup {
        let mut cycles = 0;
        for size in PageSize::ALL {
            let base = self.set_address(va.vpn(size));
            let mut off = 0;
            while off < self.set_bytes {
                cycles = cycles.max(caches.read_pt(base.offset(off)).1);
                off += 64;
            }
        }
        let entry = self.table.probe(va, asid);
        if entry.is_some() {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        PomLookup { entry, cycles }
    }

    /// Writes the entry into its set: an uncharged store.
    pub fn fill(&mut self, entry: TlbEntry, caches: &mut CacheHierarchy) {
        caches.write_line(self.set_address(entry.vpn));
        self.table.insert(entry);
    }

    pub fn invalidate(&mut self, scope: &InvalidationScope) -> usize {
        self.table.invalidate(scope)
    }

    pub fn valid_count(&self) -> usize {
        self.table.valid_count()
    }
}
