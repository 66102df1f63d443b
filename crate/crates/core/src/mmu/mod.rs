//! End-to-end address translation for every evaluated backend, including
//! the TLB-block insertion flows and invalidation commands.

mod pom;
mod space;
mod virt;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use pom::{PomLookup, PomTlb, PomTlbConfig, POM_ENTRY_BYTES};

use crate::addrspace::{Asid, MachineSpec, PageSize, PhysAddr, VirtAddr};
use crate::cachehier::{
    CacheConfig, CacheHierarchy, ReplacementPolicy, TlbBlockInsert, TlbBlockPayload, TransformOutcome,
};
use crate::error::{Error, Result};
use crate::pagetable::{update_ptw_counters, Dimension, PageWalkCaches, PwcConfig, Pte, WalkResult};
use crate::predictor::{consult, PredictorConfig};
use crate::tlbhier::{
    AccessKind, InvalidationScope, SetAssocTlb, TlbArrayConfig, TlbConfig, TlbEntry, TlbHierarchy, TlbHit, TlbLevel,
};

use space::Space;
use virt::VirtState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Radix,
    LargeL2Tlb,
    L3Tlb,
    PomTlb,
    Victima,
    #[serde(alias = "np")]
    NestedPaging,
    #[serde(alias = "isp")]
    IdealShadowPaging,
    VictimaVirt,
    PomTlbVirt,
}

impl Backend {
    pub const ALL: [Backend; 9] = [
        Backend::Radix,
        Backend::LargeL2Tlb,
        Backend::L3Tlb,
        Backend::PomTlb,
        Backend::Victima,
        Backend::NestedPaging,
        Backend::IdealShadowPaging,
        Backend::VictimaVirt,
        Backend::PomTlbVirt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Radix => "radix",
            Backend::LargeL2Tlb => "large-l2-tlb",
            Backend::L3Tlb => "l3-tlb",
            Backend::PomTlb => "pom-tlb",
            Backend::Victima => "victima",
            Backend::NestedPaging => "nested-paging",
            Backend::IdealShadowPaging => "ideal-shadow-paging",
            Backend::VictimaVirt => "victima-virt",
            Backend::PomTlbVirt => "pom-tlb-virt",
        }
    }

    pub fn is_virtualized(self) -> bool {
        matches!(
            self,
            Backend::NestedPaging | Backend::IdealShadowPaging | Backend::VictimaVirt | Backend::PomTlbVirt
        )
    }

    /// Backends that store translations in L2 cache blocks.
    pub fn uses_tlb_blocks(self) -> bool {
        matches!(self, Backend::Victima | Backend::VictimaVirt)
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let b = match s {
            "np" => Backend::NestedPaging,
            "isp" | "shadow" => Backend::IdealShadowPaging,
            "pom" => Backend::PomTlb,
            "pom-virt" => Backend::PomTlbVirt,
            _ => *Backend::ALL
                .iter()
                .find(|b| b.name() == s)
                .ok_or_else(|| {
                    let names: Vec<_> = Backend::ALL.iter().map(|b| b.name()).collect();
                    Error::config(format!("unknown backend `{s}` (expected one of {})", names.join(", ")))
                })?,
        };
        Ok(b)
    }
}

/// Backend selection plus the knobs of the structures it adds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: Backend,
    pub large_l2_tlb: TlbArrayConfig,
    pub l3_tlb: TlbArrayConfig,
    pub pom_tlb: PomTlbConfig,
    pub pwc: PwcConfig,
    /// Pending background walks before eviction-flow requests are dropped.
    pub background_queue: usize,
    pub eviction_flow: bool,
    /// Guest (gVA-keyed) TLB blocks in virtualized mode.
    pub guest_tlb_blocks: bool,
    /// Nested (gPA-keyed) TLB blocks in virtualized mode.
    pub nested_tlb_blocks: bool,
    /// Fraction of 2 MiB regions the (guest) OS backs with a large page.
    pub large_page_fraction: f64,
    /// Same, for the host's backing of guest-physical memory.
    pub host_large_page_fraction: f64,
    /// Span over which data frames of each size are scattered. Acts as the
    /// physical (or guest-physical) memory size.
    pub physical_memory_bytes: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: Backend::Radix,
            large_l2_tlb: TlbArrayConfig::new(64 << 10, 16, 12),
            l3_tlb: TlbArrayConfig::new(64 << 10, 16, 15),
            pom_tlb: PomTlbConfig::default(),
            pwc: PwcConfig::default(),
            background_queue: 8,
            eviction_flow: true,
            guest_tlb_blocks: true,
            nested_tlb_blocks: true,
            large_page_fraction: 0.3,
            host_large_page_fraction: 1.0,
            physical_memory_bytes: 16 << 30,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        self.large_l2_tlb.validate("backend.large_l2_tlb")?;
        self.l3_tlb.validate("backend.l3_tlb")?;
        self.pom_tlb.validate()?;
        for (name, f) in [
            ("backend.large_page_fraction", self.large_page_fraction),
            ("backend.host_large_page_fraction", self.host_large_page_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!("{name} must be in [0, 1]")));
            }
        }
        if self.physical_memory_bytes < 2 << 20 {
            return Err(Error::config("backend.physical_memory_bytes must be at least 2 MiB"));
        }
        Ok(())
    }
}

/// A translation-invalidation command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaintenanceCmd {
    FlushAll,
    FlushAsid(Asid),
    /// 4 KiB VPN.
    Shootdown { vpn: u64, asid: Asid },
    /// Inclusive 4 KiB VPN range.
    ShootdownRange { lo: u64, hi: u64, asid: Asid },
}

impl MaintenanceCmd {
    pub fn scope(&self) -> InvalidationScope {
        match *self {
            MaintenanceCmd::FlushAll => InvalidationScope::All,
            MaintenanceCmd::FlushAsid(a) => InvalidationScope::ByAsid(a),
            MaintenanceCmd::Shootdown { vpn, asid } => InvalidationScope::ByVa { vpn, asid },
            MaintenanceCmd::ShootdownRange { lo, hi, asid } => InvalidationScope::ByRange { lo, hi, asid },
        }
    }
}

/// Which structure resolved a translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Resolution {
    L1Tlb,
    L2Tlb,
    L3Tlb,
    PomTlb,
    L2CacheTlbBlock,
    Walk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranslationResult {
    pub pa: PhysAddr,
    pub page_size: PageSize,
    pub cycles: u64,
    pub source: Resolution,
    /// Cycles from L2 TLB miss detection to resolution.
    pub l2_miss_cycles: Option<u64>,
    /// Latency of the foreground walk, when one ran.
    pub walk_cycles: Option<u64>,
    /// Page-table references of the foreground walk, PWC hits included.
    pub pt_accesses: u32,
    /// The host-dimension share of `pt_accesses`.
    pub host_pt_accesses: u32,
    pub host_walks: u32,
    pub walk_dram_accesses: u32,
}

impl TranslationResult {
    fn hit(entry: &TlbEntry, va: VirtAddr, cycles: u32, source: Resolution) -> Self {
        Self {
            pa: PhysAddr(entry.translate(va)),
            page_size: entry.page_size,
            cycles: cycles as u64,
            source,
            l2_miss_cycles: None,
            walk_cycles: None,
            pt_accesses: 0,
            host_pt_accesses: 0,
            host_walks: 0,
            walk_dram_accesses: 0,
        }
    }
}

/// Event counters kept by the MMU over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MmuCounters {
    pub translations: u64,
    pub l2_tlb_misses: u64,
    /// Foreground walks (native, shadow or two-dimensional).
    pub ptw_count: u64,
    pub guest_ptw_count: u64,
    /// Host walks performed inside foreground two-dimensional walks.
    pub host_ptw_count: u64,
    pub pt_accesses: u64,
    pub guest_pt_accesses: u64,
    pub host_pt_accesses: u64,
    pub l2_cache_tlb_hits: u64,
    pub l2_cache_nested_tlb_hits: u64,
    pub nested_tlb_hits: u64,
    pub l3_tlb_hits: u64,
    pub pom_tlb_hits: u64,
    pub background_walks: u64,
    pub background_dropped: u64,
    pub blocks_transformed: u64,
    pub blocks_inserted_fresh: u64,
    pub blocks_already_present: u64,
    pub predictor_rejections: u64,
    pub maintenance_ops: u64,
    pub maintenance_cycles: u64,
    pub l2_tlb_miss_cycles: u64,
}

impl MmuCounters {
    fn record_outcome(&mut self, o: TransformOutcome) {
        match o {
            TransformOutcome::Transformed => self.blocks_transformed += 1,
            TransformOutcome::InsertedFresh => self.blocks_inserted_fresh += 1,
            TransformOutcome::AlreadyPresent => self.blocks_already_present += 1,
            TransformOutcome::AsidTooWide => {}
        }
    }
}

/// Bounded set of in-flight background walks, timed on the MMU clock.
#[derive(Debug, Clone)]
struct BackgroundQueue {
    capacity: usize,
    busy_until: Vec<u64>,
}

impl BackgroundQueue {
    fn has_room(&mut self, now: u64) -> bool {
        self.busy_until.retain(|&t| t > now);
        self.busy_until.len() < self.capacity
    }
}

/// The translation machinery of one simulated core together with the cache
/// hierarchy it shares with data accesses.
#[derive(Debug, Clone)]
pub struct Mmu {
    pub backend: Backend,
    cfg: BackendConfig,
    predictor: PredictorConfig,
    pub tlbs: TlbHierarchy,
    pub caches: CacheHierarchy,
    /// Native or guest page-walk caches.
    pwcs: Option<PageWalkCaches>,
    /// ASID whose table the PWC contents belong to.
    pwc_asid: Option<Asid>,
    l3_tlb: Option<SetAssocTlb>,
    pom: Option<PomTlb>,
    native: Space,
    virt: Option<VirtState>,
    background: BackgroundQueue,
    va_mask: u64,
    now: u64,
    pub counters: MmuCounters,
}

impl Mmu {
    pub fn new(
        spec: &MachineSpec,
        tlb: &TlbConfig,
        cache: &CacheConfig,
        predictor: &PredictorConfig,
        cfg: &BackendConfig,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        tlb.validate()?;
        predictor.validate()?;
        cfg.validate()?;
        let backend = cfg.kind;
        let mut cache = *cache;
        if backend.uses_tlb_blocks() {
            cache.l2.policy = ReplacementPolicy::TlbAwareSrrip;
        }
        let mut tlbs = TlbHierarchy::new(tlb);
        if backend == Backend::LargeL2Tlb {
            tlbs = tlbs.with_l2(&cfg.large_l2_tlb);
        }
        Ok(Self {
            backend,
            cfg: *cfg,
            predictor: *predictor,
            tlbs,
            caches: CacheHierarchy::new(&cache, spec)?,
            pwcs: cfg.pwc.enabled.then(|| PageWalkCaches::new(&cfg.pwc)),
            pwc_asid: None,
            l3_tlb: (backend == Backend::L3Tlb).then(|| SetAssocTlb::new(&cfg.l3_tlb, &PageSize::ALL)),
            pom: matches!(backend, Backend::PomTlb | Backend::PomTlbVirt).then(|| PomTlb::new(&cfg.pom_tlb)),
            native: Space::new(seed, cfg.large_page_fraction, 0, cfg.physical_memory_bytes),
            virt: backend
                .is_virtualized()
                .then(|| VirtState::new(seed, cfg, &tlb.nested)),
            background: BackgroundQueue {
                capacity: cfg.background_queue,
                busy_until: Vec::new(),
            },
            va_mask: spec.va_mask(),
            now: 0,
            counters: MmuCounters::default(),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    /// Retires instructions into the MPKI trackers and advances the clock.
    pub fn on_retire(&mut self, instructions: u64) {
        self.tlbs.on_retire(instructions);
        self.caches.on_retire(instructions);
        self.caches.set_tlb_mpki(self.tlbs.l2_mpki());
        self.now += instructions;
    }

    pub fn advance_clock(&mut self, cycles: u64) {
        self.now += cycles;
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Translation without timing or side effects; `None` if unmapped.
    pub fn functional_translate(&self, va: VirtAddr, asid: Asid) -> Option<PhysAddr> {
        match &self.virt {
            Some(v) => v.functional_translate(va, asid),
            None => self.native.table(asid)?.translate(va),
        }
    }

    /// Leaf PTE of a native mapping, with its walk counters.
    pub fn native_pte(&self, va: VirtAddr, asid: Asid) -> Option<Pte> {
        self.native.lookup(asid, va)
    }

    pub fn translate(&mut self, va: VirtAddr, asid: Asid, kind: AccessKind) -> Result<TranslationResult> {
        if va.0 & !self.va_mask != 0 {
            return Err(Error::config(format!("virtual address {va} exceeds the VA width")));
        }
        self.counters.translations += 1;
        if self.virt.is_some() {
            return self.translate_virtualized(va, asid, kind);
        }
        self.native.ensure_mapped(asid, va, &mut Vec::new())?;
        let lk = self.tlbs.lookup(va, asid, kind);
        match lk.hit {
            TlbHit::L1 => return Ok(TranslationResult::hit(&lk.entry.unwrap(), va, lk.cycles, Resolution::L1Tlb)),
            TlbHit::L2 => {
                let e = lk.entry.unwrap();
                self.tlbs.fill(TlbLevel::L1, kind, e);
                return Ok(TranslationResult::hit(&e, va, lk.cycles, Resolution::L2Tlb));
            }
            TlbHit::Miss => {}
        }
        self.counters.l2_tlb_misses += 1;
        let mut r = self.resolve_native_miss(va, asid)?;
        let miss_cycles = r.cycles;
        r.cycles += lk.cycles as u64;
        r.l2_miss_cycles = Some(miss_cycles);
        self.counters.l2_tlb_miss_cycles += miss_cycles;
        let entry = entry_for(va, asid, r.pa, r.page_size);
        self.tlbs.fill(TlbLevel::L1, kind, entry);
        if let Some(evicted) = self.tlbs.fill(TlbLevel::L2, kind, entry) {
            if self.backend == Backend::Victima {
                self.native_eviction_flow(evicted)?;
            }
        }
        Ok(r)
    }

    /// Resolves an L2 TLB miss; `cycles` of the result exclude the TLB
    /// lookups that detected it.
    fn resolve_native_miss(&mut self, va: VirtAddr, asid: Asid) -> Result<TranslationResult> {
        match self.backend {
            Backend::L3Tlb => {
                let l3 = self.l3_tlb.as_mut().expect("L3 TLB backend");
                let lat = l3.latency;
                if let Some(e) = l3.probe(va, asid) {
                    self.counters.l3_tlb_hits += 1;
                    return Ok(TranslationResult::hit(&e, va, lat, Resolution::L3Tlb));
                }
                let mut r = self.native_walk(va, asid)?;
                r.cycles += lat as u64;
                let e = entry_for(va, asid, r.pa, r.page_size);
                self.l3_tlb.as_mut().unwrap().insert(e);
                Ok(r)
            }
            Backend::PomTlb => {
                let pom = self.pom.as_mut().expect("POM-TLB backend");
                let lk = pom.lookup(va, asid, &mut self.caches);
                if let Some(e) = lk.entry {
                    self.counters.pom_tlb_hits += 1;
                    return Ok(TranslationResult::hit(&e, va, lk.cycles, Resolution::PomTlb));
                }
                let mut r = self.native_walk(va, asid)?;
                r.cycles += lk.cycles as u64;
                let e = entry_for(va, asid, r.pa, r.page_size);
                self.pom.as_mut().unwrap().fill(e, &mut self.caches);
                Ok(r)
            }
            Backend::Victima => {
                // The block probe and the walk start together. A probe hit
                // aborts the walk before it has any effect.
                let probe = self.caches.probe_tlb_block(va.vpn4k(), asid, false);
                if let Some(e) = probe.entry {
                    self.counters.l2_cache_tlb_hits += 1;
                    return Ok(TranslationResult::hit(&e, va, probe.cycles, Resolution::L2CacheTlbBlock));
                }
                let pre = self.native.lookup(asid, va).expect("mapped before translation");
                let mut r = self.native_walk(va, asid)?;
                r.cycles = r.cycles.max(probe.cycles as u64);
                self.native_miss_flow(va, asid, &pre);
                Ok(r)
            }
            _ => self.native_walk(va, asid),
        }
    }

    fn sync_pwcs(&mut self, asid: Asid) {
        if self.pwc_asid != Some(asid) {
            if let Some(p) = self.pwcs.as_mut() {
                p.flush();
            }
            self.pwc_asid = Some(asid);
        }
    }

    /// Walks the native table and updates the leaf's counters. Counted as
    /// a foreground walk.
    fn native_walk(&mut self, va: VirtAddr, asid: Asid) -> Result<TranslationResult> {
        let w = self.walk_native_table(va, asid)?;
        let pt = w.pt_accesses() as u64;
        self.counters.ptw_count += 1;
        self.counters.pt_accesses += pt;
        Ok(walk_result(&w, 0))
    }

    fn walk_native_table(&mut self, va: VirtAddr, asid: Asid) -> Result<WalkResult> {
        self.sync_pwcs(asid);
        let table = self
            .native
            .tables_mut()
            .get_mut(&asid)
            .ok_or(Error::PageFault { addr: va.0 })?;
        let w = table.walk(va, self.pwcs.as_mut(), &mut self.caches)?;
        update_ptw_counters(table.leaf_mut(va).expect("walked leaf"), w.dram_access_count);
        Ok(w)
    }

    fn wants_block(&mut self, pte: &Pte) -> bool {
        let yes = consult(self.caches.l2_mpki(), pte.ptw_freq, pte.ptw_cost, &self.predictor);
        if !yes {
            self.counters.predictor_rejections += 1;
        }
        yes
    }

    /// Miss flow: consult the predictor with the counters the walk found
    /// and, if positive, turn the leaf PTE line into a TLB block.
    fn native_miss_flow(&mut self, va: VirtAddr, asid: Asid, pre: &Pte) {
        if !self.wants_block(pre) {
            return;
        }
        self.insert_native_block(va, asid);
    }

    fn insert_native_block(&mut self, va: VirtAddr, asid: Asid) {
        let Some(line) = self.native.table(asid).and_then(|t| t.leaf_line(va)) else {
            return;
        };
        let outcome = self.caches.transform_to_tlb_block(&TlbBlockInsert {
            leaf_line_pa: line.line_pa,
            vpn_base: line.vpn_base,
            asid,
            page_size: line.size,
            nested: false,
            payload: TlbBlockPayload { pfns: line.pfns },
        });
        self.counters.record_outcome(outcome);
    }

    /// Reserves a background-walk slot, or counts a drop.
    fn reserve_background(&mut self) -> bool {
        if self.background.has_room(self.now) {
            true
        } else {
            self.counters.background_dropped += 1;
            false
        }
    }

    fn finish_background(&mut self, cycles: u64) {
        self.counters.background_walks += 1;
        self.background.busy_until.push(self.now + cycles);
    }

    /// Eviction flow: a displaced L2 TLB entry whose page is predicted
    /// costly gets its TLB block via a background walk.
    fn native_eviction_flow(&mut self, evicted: TlbEntry) -> Result<()> {
        if !self.cfg.eviction_flow || !self.caches.widths.asid_fits(evicted.asid.0) {
            return Ok(());
        }
        let va = VirtAddr(evicted.vpn << evicted.page_size.shift());
        let Some(pte) = self.native.lookup(evicted.asid, va) else {
            return Ok(());
        };
        if !self.wants_block(&pte)
            || self
                .caches
                .has_tlb_block(evicted.vpn & !7, evicted.page_size, evicted.asid, false)
            || !self.reserve_background()
        {
            return Ok(());
        }
        let w = self.walk_native_table(va, evicted.asid)?;
        self.finish_background(w.total_cycles);
        self.insert_native_block(va, evicted.asid);
        Ok(())
    }

    /// Applies an invalidation command to every translation structure and
    /// returns its cycle cost.
    pub fn maintenance(&mut self, cmd: &MaintenanceCmd) -> u64 {
        let scope = cmd.scope();
        self.tlbs.invalidate(&scope);
        if let Some(l3) = self.l3_tlb.as_mut() {
            l3.invalidate(&scope);
        }
        if let Some(pom) = self.pom.as_mut() {
            pom.invalidate(&scope);
        }
        if let Some(p) = self.pwcs.as_mut() {
            p.flush();
        }
        if let Some(v) = self.virt.as_mut() {
            v.on_maintenance(cmd);
        }
        if self.backend.uses_tlb_blocks() {
            self.caches.invalidate_tlb_blocks(&scope, false);
        }
        let cycles = self.caches.maintenance_latency as u64;
        self.counters.maintenance_ops += 1;
        self.counters.maintenance_cycles += cycles;
        cycles
    }
}

fn entry_for(va: VirtAddr, asid: Asid, pa: PhysAddr, size: PageSize) -> TlbEntry {
    TlbEntry {
        vpn: va.vpn(size),
        pfn: (pa.0 - va.page_offset(size)) >> 12,
        page_size: size,
        asid,
    }
}

fn walk_result(w: &WalkResult, host_walks: u32) -> TranslationResult {
    TranslationResult {
        pa: w.pa,
        page_size: w.page_size.expect("completed walk"),
        cycles: w.total_cycles,
        source: Resolution::Walk,
        l2_miss_cycles: None,
        walk_cycles: Some(w.total_cycles),
        pt_accesses: w.pt_accesses() as u32,
        host_pt_accesses: pt_in(w, Dimension::Host),
        host_walks,
        walk_dram_accesses: w.dram_access_count,
    }
}

/// Page-table accesses of `w` in dimension `dim`.
fn pt_in(w: &WalkResult, dim: Dimension) -> u32 {
    w.pt_accesses_in(dim) as u32
}
