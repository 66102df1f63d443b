//! L1/L2/L3 caches over flat-latency DRAM. The L2 additionally stores TLB
//! blocks and nested TLB blocks under a TLB-aware SRRIP policy.

mod level;
mod tags;

use serde::{Deserialize, Serialize};

pub use level::{
    srrip_insert_rrpv, srrip_on_hit, srrip_victim, BlockKind, BlockMeta, CacheLevel, CacheLevelConfig, Evicted,
    LevelStats, ReplacementPolicy, ReuseHistogram, TlbBlockPayload, RRIP_MAX, TLB_PRESSURE_MPKI,
};
pub use tags::{derive_tag_widths, TagWidths, ASID_FIELD_MAX_BITS, PAGE_SIZE_FIELD_BITS};

use crate::addrspace::{Asid, MachineSpec, PageSize, PhysAddr, BASE_PAGE_SHIFT};
use crate::error::Result;
use crate::pagetable::MemoryPort;
use crate::tlbhier::{AccessKind, InvalidationScope, MpkiTracker, TlbEntry};

/// Where an access was served.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ServicePoint {
    Pwc,
    L1,
    L2,
    L3,
    Dram,
    NestedTlb,
    /// A TLB block in the L2 cache.
    L2TlbBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    pub l1i: CacheLevelConfig,
    pub l1d: CacheLevelConfig,
    pub l2: CacheLevelConfig,
    pub l3: CacheLevelConfig,
    pub dram_latency: u32,
    /// Cost of one TLB-block invalidation command (100 ns at 2.6 GHz).
    pub maintenance_latency: u32,
    pub mpki_epoch_instructions: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        let lvl = |size_bytes, ways, latency, policy| CacheLevelConfig {
            size_bytes,
            ways,
            latency,
            policy,
        };
        Self {
            l1i: lvl(32 << 10, 8, 4, ReplacementPolicy::Lru),
            l1d: lvl(32 << 10, 8, 4, ReplacementPolicy::Lru),
            l2: lvl(2 << 20, 16, 16, ReplacementPolicy::Srrip),
            l3: lvl(2 << 20, 16, 35, ReplacementPolicy::Lru),
            dram_latency: 150,
            maintenance_latency: 260,
            mpki_epoch_instructions: 100_000,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self, spec: &MachineSpec) -> Result<()> {
        let line = spec.cache_line_bytes;
        self.l1i.validate("cache.l1i", line)?;
        self.l1d.validate("cache.l1d", line)?;
        self.l2.validate("cache.l2", line)?;
        self.l3.validate("cache.l3", line)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataAccess {
    pub service: ServicePoint,
    pub cycles: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbBlockProbe {
    /// The translation, when a matching block holds a present PTE.
    pub entry: Option<TlbEntry>,
    /// A block for the group was found, even if its slot is not present.
    pub block_found: bool,
    pub cycles: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformOutcome {
    /// A block for the group was already resident; nothing changed.
    AlreadyPresent,
    /// The PTE line was found in L2 and became a TLB block.
    Transformed,
    /// The PTE line had left L2; a fresh TLB block was allocated instead.
    InsertedFresh,
    /// The ASID does not fit the tag; nothing inserted.
    AsidTooWide,
}

/// A TLB-block insertion request: the PTE line plus what it translates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbBlockInsert {
    pub leaf_line_pa: PhysAddr,
    /// First VPN of the group, in `page_size` units; a multiple of 8.
    pub vpn_base: u64,
    pub asid: Asid,
    pub page_size: PageSize,
    pub nested: bool,
    pub payload: TlbBlockPayload,
}

#[derive(Debug, Clone)]
pub struct CacheHierarchy {
    pub l1i: CacheLevel,
    pub l1d: CacheLevel,
    pub l2: CacheLevel,
    pub l3: CacheLevel,
    pub dram_latency: u32,
    pub maintenance_latency: u32,
    pub widths: TagWidths,
    line_bytes: u64,
    /// L2 demand-miss MPKI, consumed by the predictor bypass.
    pub l2_tracker: MpkiTracker,
    /// Latest L2 TLB MPKI, consumed by the TLB-aware policy.
    tlb_mpki: f64,
    pub dram_accesses: u64,
    pub dram_writebacks: u64,
}

impl CacheHierarchy {
    pub fn new(cfg: &CacheConfig, spec: &MachineSpec) -> Result<Self> {
        cfg.validate(spec)?;
        let line = spec.cache_line_bytes;
        let widths = derive_tag_widths(spec, cfg.l2.num_sets(line))?;
        Ok(Self {
            l1i: CacheLevel::new(&cfg.l1i, line),
            l1d: CacheLevel::new(&cfg.l1d, line),
            l2: CacheLevel::new(&cfg.l2, line),
            l3: CacheLevel::new(&cfg.l3, line),
            dram_latency: cfg.dram_latency,
            maintenance_latency: cfg.maintenance_latency,
            widths,
            line_bytes: line,
            l2_tracker: MpkiTracker::new(cfg.mpki_epoch_instructions),
            tlb_mpki: 0.0,
            dram_accesses: 0,
            dram_writebacks: 0,
        })
    }

    pub fn set_tlb_mpki(&mut self, mpki: f64) {
        self.tlb_mpki = mpki;
    }

    pub fn tlb_mpki(&self) -> f64 {
        self.tlb_mpki
    }

    pub fn l2_mpki(&self) -> f64 {
        self.l2_tracker.mpki()
    }

    pub fn on_retire(&mut self, instructions: u64) {
        self.l2_tracker.on_retire(instructions);
    }

    fn writeback_from_l1(&mut self, ev: Evicted) {
        if !ev.dirty {
            return;
        }
        if !self.l2.mark_dirty(ev.line_addr) {
            self.writeback_from_l2(ev);
        }
    }

    fn writeback_from_l2(&mut self, ev: Evicted) {
        if ev.kind != BlockKind::Data || !ev.dirty {
            return;
        }
        if !self.l3.mark_dirty(ev.line_addr) {
            self.dram_writebacks += 1;
        }
    }

    fn fill_l2(&mut self, line: u64) {
        if let Some(ev) = self.l2.fill(line, false, self.tlb_mpki) {
            self.writeback_from_l2(ev);
        }
    }

    fn fill_l3(&mut self, line: u64) {
        if let Some(ev) = self.l3.fill(line, false, self.tlb_mpki) {
            if ev.dirty {
                self.dram_writebacks += 1;
            }
        }
    }

    /// Demand access from the core: L1 -> L2 -> L3 -> DRAM, filling upward.
    pub fn access_data(&mut self, pa: PhysAddr, kind: AccessKind) -> DataAccess {
        let line = pa.line(self.line_bytes).0;
        let write = kind == AccessKind::Store;
        let mpki = self.tlb_mpki;
        let l1 = match kind {
            AccessKind::InstrFetch => &mut self.l1i,
            _ => &mut self.l1d,
        };
        let mut cycles = l1.latency;
        if l1.access(line, write, mpki) {
            return DataAccess {
                service: ServicePoint::L1,
                cycles,
            };
        }
        let (service, below) = self.read_below_l1(line);
        cycles += below;
        let l1 = match kind {
            AccessKind::InstrFetch => &mut self.l1i,
            _ => &mut self.l1d,
        };
        if let Some(ev) = l1.fill(line, write, mpki) {
            self.writeback_from_l1(ev);
        }
        DataAccess { service, cycles }
    }

    /// L2 -> L3 -> DRAM, filling L2 and L3. Shared by demand misses and
    /// page-table reads.
    fn read_below_l1(&mut self, line: u64) -> (ServicePoint, u32) {
        let mpki = self.tlb_mpki;
        let mut cycles = self.l2.latency;
        if self.l2.access(line, false, mpki) {
            return (ServicePoint::L2, cycles);
        }
        self.l2_tracker.record_miss();
        cycles += self.l3.latency;
        let service = if self.l3.access(line, false, mpki) {
            ServicePoint::L3
        } else {
            cycles += self.dram_latency;
            self.dram_accesses += 1;
            self.fill_l3(line);
            ServicePoint::Dram
        };
        self.fill_l2(line);
        (service, cycles)
    }

    /// Store that bypasses the core caches, e.g. a software-managed TLB fill.
    pub fn write_line(&mut self, pa: PhysAddr) {
        let line = pa.line(self.line_bytes).0;
        if !self.l2.mark_dirty(line) {
            if let Some(ev) = self.l2.fill(line, true, self.tlb_mpki) {
                self.writeback_from_l2(ev);
            }
        }
    }

    /// Dual-hypothesis lookup of a TLB block (4 KiB and 2 MiB VPNs, probed
    /// in parallel and charged one L2 latency).
    pub fn probe_tlb_block(&mut self, vpn4k: u64, asid: Asid, nested: bool) -> TlbBlockProbe {
        let kind = if nested { BlockKind::NestedTlbBlock } else { BlockKind::TlbBlock };
        let cycles = self.l2.latency;
        let mpki = self.tlb_mpki;
        let mut block_found = false;
        for size in PageSize::ALL {
            let vpn = vpn4k >> (size.shift() - BASE_PAGE_SHIFT);
            if let Some(payload) = self.l2.probe_tlb(kind, vpn, size, asid, mpki) {
                block_found = true;
                if let Some(pfn) = payload.pfns[(vpn & 7) as usize] {
                    return TlbBlockProbe {
                        entry: Some(TlbEntry {
                            vpn,
                            pfn,
                            page_size: size,
                            asid,
                        }),
                        block_found,
                        cycles,
                    };
                }
            }
        }
        TlbBlockProbe {
            entry: None,
            block_found,
            cycles,
        }
    }

    pub fn has_tlb_block(&self, vpn: u64, size: PageSize, asid: Asid, nested: bool) -> bool {
        let kind = if nested { BlockKind::NestedTlbBlock } else { BlockKind::TlbBlock };
        self.l2.has_tlb_block(kind, vpn, size, asid)
    }

    /// Turns the PTE line at `req.leaf_line_pa` into a TLB block. The line
    /// stops being reachable by its physical address; the block is placed
    /// in the set its VPN selects. A resident block for the group takes the
    /// new payload, since PTEs in the line may have been filled in since.
    pub fn transform_to_tlb_block(&mut self, req: &TlbBlockInsert) -> TransformOutcome {
        if !self.widths.asid_fits(req.asid.0) {
            return TransformOutcome::AsidTooWide;
        }
        let kind = if req.nested { BlockKind::NestedTlbBlock } else { BlockKind::TlbBlock };
        if self.l2.refresh_tlb(kind, req.vpn_base, req.page_size, req.asid, req.payload) {
            return TransformOutcome::AlreadyPresent;
        }
        let line = req.leaf_line_pa.line(self.line_bytes).0;
        let outcome = match self.l2.invalidate_line(line) {
            Some(old) => {
                if old.dirty {
                    self.writeback_from_l2(Evicted {
                        kind: BlockKind::Data,
                        dirty: true,
                        line_addr: line,
                    });
                }
                TransformOutcome::Transformed
            }
            None => TransformOutcome::InsertedFresh,
        };
        let mpki = self.tlb_mpki;
        if let Some(ev) = self.l2.insert_tlb(kind, req.vpn_base, req.page_size, req.asid, req.payload, mpki) {
            self.writeback_from_l2(ev);
        }
        outcome
    }

    /// Executes one TLB-block invalidation command. `nested` selects the
    /// block kind for scoped commands; `All` clears both kinds. An ASID too
    /// wide for the tag escalates to clearing every TLB block of that kind.
    pub fn invalidate_tlb_blocks(&mut self, scope: &InvalidationScope, nested: bool) -> usize {
        let kind = if nested { BlockKind::NestedTlbBlock } else { BlockKind::TlbBlock };
        match *scope {
            InvalidationScope::All => self.l2.invalidate_tlb_where(|_| true),
            InvalidationScope::ByAsid(a) if !self.widths.asid_fits(a.0) => {
                self.l2.invalidate_tlb_where(|b| b.kind == kind)
            }
            InvalidationScope::ByAsid(a) => self.l2.invalidate_tlb_where(|b| b.kind == kind && b.asid == a),
            InvalidationScope::ByVa { vpn, asid } => self.invalidate_group(kind, vpn, asid),
            InvalidationScope::ByRange { lo, hi, asid } => {
                let mut n = 0;
                let mut group = lo & !7;
                while group <= hi {
                    n += self.invalidate_group(kind, group, asid);
                    group += 8;
                }
                // Large-page blocks covering the range.
                let mut g2 = (lo >> 9) & !7;
                while g2 <= hi >> 9 {
                    n += self.l2.invalidate_tlb_block(kind, g2, PageSize::Size2M, asid) as usize;
                    g2 += 8;
                }
                n
            }
        }
    }

    /// Drops the block(s) that could hold 4 KiB VPN `vpn`, killing all
    /// eight entries of the group.
    fn invalidate_group(&mut self, kind: BlockKind, vpn: u64, asid: Asid) -> usize {
        self.l2.invalidate_tlb_block(kind, vpn, PageSize::Size4K, asid) as usize
            + self.l2.invalidate_tlb_block(kind, vpn >> 9, PageSize::Size2M, asid) as usize
    }

    /// Translation reach of resident (non-nested) TLB blocks in bytes.
    pub fn translation_reach(&self) -> u64 {
        PageSize::ALL
            .iter()
            .map(|&s| self.l2.resident(BlockKind::TlbBlock, s) * 8 * s.bytes())
            .sum()
    }

    pub fn tlb_block_count(&self) -> u64 {
        PageSize::ALL
            .iter()
            .map(|&s| self.l2.resident(BlockKind::TlbBlock, s) + self.l2.resident(BlockKind::NestedTlbBlock, s))
            .sum()
    }
}

impl MemoryPort for CacheHierarchy {
    /// The page walker sits beside the L2: its reads start there.
    fn read_pt(&mut self, pa: PhysAddr) -> (ServicePoint, u32) {
        let line = pa.line(self.line_bytes).0;
        self.read_below_l1(line)
    }

    fn as_caches(&mut self) -> Option<&mut CacheHierarchy> {
        Some(self)
    }
}
