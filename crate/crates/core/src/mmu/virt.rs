//! Virtualized translation: nested paging, ideal shadow paging, and their
//! TLB-block and POM-TLB variants.

use crate::addrspace::{Asid, PageSize, PhysAddr, VirtAddr};
use crate::cachehier::{ServicePoint, TlbBlockInsert, TlbBlockPayload, TransformOutcome};
use crate::error::{Error, Result};
use crate::pagetable::{
    nested_walk, update_ptw_counters, Dimension, HostMapping, HostTranslator, MemoryPort, PageWalkCaches, Pte,
    RadixPageTable, WalkAccess, WalkResult,
};
use crate::predictor::{consult, PredictorConfig};
use crate::tlbhier::{AccessKind, InvalidationScope, SetAssocTlb, TlbArrayConfig, TlbEntry, TlbHit, TlbLevel};

use super::space::Space;
use super::{entry_for, pt_in, walk_result, Backend, BackendConfig, MaintenanceCmd, Mmu, Resolution, TranslationResult};

/// The single virtual machine's identifier; tags nested TLB entries and
/// nested TLB blocks.
pub const VMID: Asid = Asid(0);

/// Step used when host-mapping a guest page: one small-page group.
const HOST_GROUP_BYTES: u64 = 8 << 12;

#[derive(Debug, Clone)]
pub(crate) struct VirtState {
    /// gVA -> gPA, one table per guest ASID.
    guest: Space,
    /// gPA -> hPA under `VMID`.
    host: Space,
    /// gVA -> hPA, built lazily for shadow paging.
    shadow: Space,
    host_pwcs: Option<PageWalkCaches>,
    nested_tlb: Option<SetAssocTlb>,
}

impl VirtState {
    pub fn new(seed: u64, cfg: &BackendConfig, nested_tlb: &TlbArrayConfig) -> Self {
        Self {
            guest: Space::new(seed, cfg.large_page_fraction, 0, cfg.physical_memory_bytes),
            host: Space::new(seed ^ 0x0f0f_1234, cfg.host_large_page_fraction, 0, cfg.physical_memory_bytes),
            shadow: Space::new(seed, 0.0, 1, cfg.physical_memory_bytes),
            host_pwcs: cfg.pwc.enabled.then(|| PageWalkCaches::new(&cfg.pwc)),
            nested_tlb: (nested_tlb.entries > 0).then(|| SetAssocTlb::new(nested_tlb, &PageSize::ALL)),
        }
    }

    /// gVA -> (hPA, effective page size).
    fn compose(&self, asid: Asid, gva: VirtAddr) -> Option<(u64, PageSize)> {
        let g = self.guest.lookup(asid, gva)?;
        let gpa = g.frame_base() + gva.page_offset(g.size);
        let h = self.host.lookup(VMID, VirtAddr(gpa))?;
        Some((h.frame_base() + VirtAddr(gpa).page_offset(h.size), g.size.min(h.size)))
    }

    pub fn functional_translate(&self, gva: VirtAddr, asid: Asid) -> Option<PhysAddr> {
        self.compose(asid, gva).map(|(hpa, _)| PhysAddr(hpa))
    }

    /// Maps the guest page on first touch and host-maps every
    /// guest-physical page that creates, table nodes included.
    fn ensure_mapped(&mut self, asid: Asid, gva: VirtAddr) -> Result<()> {
        let mut fresh = Vec::new();
        self.guest.ensure_mapped(asid, gva, &mut fresh)?;
        let mut ignored = Vec::new();
        for (gpa, size) in fresh {
            let mut a = gpa;
            while a < gpa + size.bytes() {
                self.host.ensure_mapped(VMID, VirtAddr(a), &mut ignored)?;
                a += HOST_GROUP_BYTES;
            }
        }
        Ok(())
    }

    /// Adds the shadow entries covering `gva`, at the smaller of the guest
    /// and host page sizes.
    fn ensure_shadow(&mut self, asid: Asid, gva: VirtAddr) -> Result<()> {
        if self.shadow.lookup(asid, gva).is_some() {
            return Ok(());
        }
        let (_, size) = self.compose(asid, gva).ok_or(Error::PageFault { addr: gva.0 })?;
        let (first, count) = match size {
            PageSize::Size2M => (gva.vpn(size), 1),
            PageSize::Size4K => (gva.vpn4k() & !7, 8),
        };
        for vpn in first..first + count {
            let va = VirtAddr(vpn << size.shift());
            let Some((hpa, _)) = self.compose(asid, va) else {
                continue;
            };
            let table = self.shadow.table_or_create(asid, &mut Vec::new())?;
            if table.lookup(va).is_none() {
                table.map(vpn, hpa >> 12, size)?;
            }
        }
        Ok(())
    }

    /// Composed frames of the eight gVA pages of a guest TLB block.
    fn guest_block_payload(&self, asid: Asid, vpn_base: u64, size: PageSize) -> TlbBlockPayload {
        let mut payload = TlbBlockPayload::default();
        for (i, slot) in payload.pfns.iter_mut().enumerate() {
            let va = VirtAddr((vpn_base + i as u64) << size.shift());
            if let Some((hpa, eff)) = self.compose(asid, va) {
                if eff >= size {
                    *slot = Some(hpa >> 12);
                }
            }
        }
        payload
    }

    pub fn on_maintenance(&mut self, cmd: &MaintenanceCmd) {
        if *cmd == MaintenanceCmd::FlushAll {
            if let Some(t) = self.nested_tlb.as_mut() {
                t.invalidate(&InvalidationScope::All);
            }
            if let Some(p) = self.host_pwcs.as_mut() {
                p.flush();
            }
        }
    }
}

/// Host translation for the two-dimensional walker: nested TLB, then (when
/// enabled) nested TLB blocks in the L2 cache, then a host walk.
struct VirtHost<'a> {
    host_pt: &'a mut RadixPageTable,
    pwcs: Option<&'a mut PageWalkCaches>,
    nested_tlb: Option<&'a mut SetAssocTlb>,
    nested_blocks: bool,
    predictor: &'a PredictorConfig,
    host_walks: u32,
    nested_tlb_hits: u32,
    block_hits: u32,
    rejections: u32,
    outcomes: Vec<TransformOutcome>,
    evicted: Vec<TlbEntry>,
}

impl VirtHost<'_> {
    fn fill_nested_tlb(&mut self, e: TlbEntry) {
        if let Some(tlb) = self.nested_tlb.as_deref_mut() {
            if let Some(ev) = tlb.insert(e) {
                self.evicted.push(ev);
            }
        }
    }
}

impl HostTranslator for VirtHost<'_> {
    fn translate_gpa(&mut self, gpa: u64, mem: &mut dyn MemoryPort, out: &mut WalkResult) -> Result<HostMapping> {
        let key = VirtAddr(gpa);
        if let Some(tlb) = self.nested_tlb.as_deref_mut() {
            if let Some(e) = tlb.probe(key, VMID) {
                out.push(WalkAccess {
                    dim: Dimension::Host,
                    level: 0,
                    pa: gpa,
                    service: ServicePoint::NestedTlb,
                    cycles: tlb.latency,
                });
                self.nested_tlb_hits += 1;
                return Ok(HostMapping {
                    hpa: e.translate(key),
                    size: e.page_size,
                });
            }
        }
        if self.nested_blocks {
            let caches = mem.as_caches().expect("nested TLB blocks need the cache hierarchy");
            let p = caches.probe_tlb_block(key.vpn4k(), VMID, true);
            if let Some(e) = p.entry {
                // The host walk started alongside the probe is aborted.
                out.push(WalkAccess {
                    dim: Dimension::Host,
                    level: 0,
                    pa: gpa,
                    service: ServicePoint::L2TlbBlock,
                    cycles: p.cycles,
                });
                self.block_hits += 1;
                self.fill_nested_tlb(e);
                return Ok(HostMapping {
                    hpa: e.translate(key),
                    size: e.page_size,
                });
            }
        }
        let pre = self.host_pt.lookup(key).ok_or(Error::PageFault { addr: gpa })?;
        let dram_before = out.dram_access_count;
        let (pte, _) = self.host_pt.walk_into(
            key,
            self.pwcs.as_deref_mut(),
            mem,
            Dimension::Host,
            &mut |a, _, _| Ok(a),
            out,
        )?;
        self.host_walks += 1;
        update_ptw_counters(self.host_pt.leaf_mut(key).expect("walked leaf"), out.dram_access_count - dram_before);
        if self.nested_blocks {
            let caches = mem.as_caches().expect("nested TLB blocks need the cache hierarchy");
            if consult(caches.l2_mpki(), pre.ptw_freq, pre.ptw_cost, self.predictor) {
                if let Some(line) = self.host_pt.leaf_line(key) {
                    self.outcomes.push(caches.transform_to_tlb_block(&TlbBlockInsert {
                        leaf_line_pa: line.line_pa,
                        vpn_base: line.vpn_base,
                        asid: VMID,
                        page_size: line.size,
                        nested: true,
                        payload: TlbBlockPayload { pfns: line.pfns },
                    }));
                }
            } else {
                self.rejections += 1;
            }
        }
        self.fill_nested_tlb(TlbEntry {
            vpn: key.vpn(pte.size),
            pfn: pte.pfn,
            page_size: pte.size,
            asid: VMID,
        });
        Ok(HostMapping {
            hpa: pte.frame_base() + key.page_offset(pte.size),
            size: pte.size,
        })
    }
}

/// What one two-dimensional walk did besides producing its result.
struct NestedWalk {
    walk: WalkResult,
    host_walks: u32,
    nested_tlb_hits: u32,
    block_hits: u32,
    evicted: Vec<TlbEntry>,
}

impl Mmu {
    fn virt(&mut self) -> &mut VirtState {
        self.virt.as_mut().expect("virtualized backend")
    }

    pub(super) fn translate_virtualized(
        &mut self,
        va: VirtAddr,
        asid: Asid,
        kind: AccessKind,
    ) -> Result<TranslationResult> {
        self.virt().ensure_mapped(asid, va)?;
        if self.backend == Backend::IdealShadowPaging {
            self.virt().ensure_shadow(asid, va)?;
        }
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
        let mut r = self.resolve_virt_miss(va, asid)?;
        let miss_cycles = r.cycles;
        r.cycles += lk.cycles as u64;
        r.l2_miss_cycles = Some(miss_cycles);
        self.counters.l2_tlb_miss_cycles += miss_cycles;
        let entry = entry_for(va, asid, r.pa, r.page_size);
        self.tlbs.fill(TlbLevel::L1, kind, entry);
        if let Some(evicted) = self.tlbs.fill(TlbLevel::L2, kind, entry) {
            if self.backend == Backend::VictimaVirt && self.cfg.guest_tlb_blocks {
                self.guest_eviction_flow(evicted)?;
            }
        }
        Ok(r)
    }

    fn resolve_virt_miss(&mut self, va: VirtAddr, asid: Asid) -> Result<TranslationResult> {
        match self.backend {
            Backend::IdealShadowPaging => {
                self.sync_pwcs(asid);
                let v = self.virt.as_mut().expect("virtualized backend");
                let table = v.shadow.tables_mut().get_mut(&asid).ok_or(Error::PageFault { addr: va.0 })?;
                let w = table.walk(va, self.pwcs.as_mut(), &mut self.caches)?;
                update_ptw_counters(table.leaf_mut(va).expect("walked leaf"), w.dram_access_count);
                let pt = w.pt_accesses() as u64;
                self.counters.ptw_count += 1;
                self.counters.pt_accesses += pt;
                Ok(walk_result(&w, 0))
            }
            Backend::PomTlbVirt => {
                let pom = self.pom.as_mut().expect("POM-TLB backend");
                let lk = pom.lookup(va, asid, &mut self.caches);
                if let Some(e) = lk.entry {
                    self.counters.pom_tlb_hits += 1;
                    return Ok(TranslationResult::hit(&e, va, lk.cycles, Resolution::PomTlb));
                }
                let mut r = self.foreground_nested_walk(va, asid)?.0;
                r.cycles += lk.cycles as u64;
                let e = entry_for(va, asid, r.pa, r.page_size);
                self.pom.as_mut().unwrap().fill(e, &mut self.caches);
                Ok(r)
            }
            Backend::VictimaVirt if self.cfg.guest_tlb_blocks => {
                let probe = self.caches.probe_tlb_block(va.vpn4k(), asid, false);
                if let Some(e) = probe.entry {
                    self.counters.l2_cache_tlb_hits += 1;
                    return Ok(TranslationResult::hit(&e, va, probe.cycles, Resolution::L2CacheTlbBlock));
                }
                let pre = self.virt().guest.lookup(asid, va).expect("mapped before translation");
                let (mut r, leaf_line) = self.foreground_nested_walk(va, asid)?;
                r.cycles = r.cycles.max(probe.cycles as u64);
                if self.wants_block(&pre) {
                    self.insert_guest_block(va, asid, r.page_size, leaf_line);
                }
                Ok(r)
            }
            _ => Ok(self.foreground_nested_walk(va, asid)?.0),
        }
    }

    /// Runs a two-dimensional walk as the foreground resolution of a miss,
    /// then the nested-TLB eviction flow for anything it displaced.
    /// Returns the result and the host-physical guest leaf line.
    fn foreground_nested_walk(&mut self, va: VirtAddr, asid: Asid) -> Result<(TranslationResult, PhysAddr)> {
        let n = self.nested_walk(va, asid)?;
        let w = &n.walk;
        let c = &mut self.counters;
        c.ptw_count += 1;
        c.guest_ptw_count += 1;
        c.host_ptw_count += n.host_walks as u64;
        c.pt_accesses += w.pt_accesses() as u64;
        c.guest_pt_accesses += pt_in(w, Dimension::Guest) as u64;
        c.host_pt_accesses += pt_in(w, Dimension::Host) as u64;
        c.nested_tlb_hits += n.nested_tlb_hits as u64;
        c.l2_cache_nested_tlb_hits += n.block_hits as u64;
        let r = walk_result(w, n.host_walks);
        let leaf_line = w.leaf_line_pa;
        for ev in n.evicted {
            self.nested_eviction_flow(ev)?;
        }
        Ok((r, leaf_line))
    }

    fn nested_walk(&mut self, va: VirtAddr, asid: Asid) -> Result<NestedWalk> {
        self.sync_pwcs(asid);
        let nested_blocks = self.backend == Backend::VictimaVirt && self.cfg.nested_tlb_blocks;
        let v = self.virt.as_mut().expect("virtualized backend");
        let guest_pt = v.guest.table(asid).ok_or(Error::PageFault { addr: va.0 })?;
        let mut host = VirtHost {
            host_pt: v.host.tables_mut().get_mut(&VMID).ok_or(Error::PageFault { addr: va.0 })?,
            pwcs: v.host_pwcs.as_mut(),
            nested_tlb: v.nested_tlb.as_mut(),
            nested_blocks,
            predictor: &self.predictor,
            host_walks: 0,
            nested_tlb_hits: 0,
            block_hits: 0,
            rejections: 0,
            outcomes: Vec::new(),
            evicted: Vec::new(),
        };
        let walk = nested_walk(guest_pt, va, self.pwcs.as_mut(), &mut host, &mut self.caches)?;
        let VirtHost {
            host_walks,
            nested_tlb_hits,
            block_hits,
            rejections,
            outcomes,
            evicted,
            ..
        } = host;
        let leaf = v.guest.tables_mut().get_mut(&asid).and_then(|t| t.leaf_mut(va)).expect("walked leaf");
        update_ptw_counters(leaf, walk.dram_access_count);
        self.counters.predictor_rejections += rejections as u64;
        for o in outcomes {
            self.counters.record_outcome(o);
        }
        Ok(NestedWalk {
            walk,
            host_walks,
            nested_tlb_hits,
            block_hits,
            evicted,
        })
    }

    fn insert_guest_block(&mut self, va: VirtAddr, asid: Asid, size: PageSize, leaf_line_pa: PhysAddr) {
        let vpn_base = va.vpn(size) & !7;
        let payload = self.virt().guest_block_payload(asid, vpn_base, size);
        let outcome = self.caches.transform_to_tlb_block(&TlbBlockInsert {
            leaf_line_pa,
            vpn_base,
            asid,
            page_size: size,
            nested: false,
            payload,
        });
        self.counters.record_outcome(outcome);
    }

    /// Guest-level eviction flow: a background two-dimensional walk finds
    /// the guest leaf line, which then becomes a TLB block.
    fn guest_eviction_flow(&mut self, evicted: TlbEntry) -> Result<()> {
        if !self.cfg.eviction_flow || !self.caches.widths.asid_fits(evicted.asid.0) {
            return Ok(());
        }
        let va = VirtAddr(evicted.vpn << evicted.page_size.shift());
        let Some(pte) = self.virt().guest.lookup(evicted.asid, va) else {
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
        let n = self.nested_walk(va, evicted.asid)?;
        self.finish_background(n.walk.total_cycles);
        self.insert_guest_block(va, evicted.asid, evicted.page_size, n.walk.leaf_line_pa);
        Ok(())
    }

    /// Nested-TLB eviction flow: a background host walk, then the host
    /// leaf line becomes a nested TLB block.
    fn nested_eviction_flow(&mut self, evicted: TlbEntry) -> Result<()> {
        if self.backend != Backend::VictimaVirt || !self.cfg.nested_tlb_blocks || !self.cfg.eviction_flow {
            return Ok(());
        }
        let key = VirtAddr(evicted.vpn << evicted.page_size.shift());
        let Some(pte) = self.virt().host.lookup(VMID, key) else {
            return Ok(());
        };
        if !self.wants_block(&pte)
            || self.caches.has_tlb_block(evicted.vpn & !7, evicted.page_size, VMID, true)
            || !self.reserve_background()
        {
            return Ok(());
        }
        let v = self.virt.as_mut().expect("virtualized backend");
        let host_pt = v.host.tables_mut().get_mut(&VMID).expect("host table");
        let w = host_pt.walk(key, v.host_pwcs.as_mut(), &mut self.caches)?;
        update_ptw_counters(host_pt.leaf_mut(key).expect("walked leaf"), w.dram_access_count);
        let line = host_pt.leaf_line(key).expect("walked leaf");
        self.finish_background(w.total_cycles);
        let outcome = self.caches.transform_to_tlb_block(&TlbBlockInsert {
            leaf_line_pa: line.line_pa,
            vpn_base: line.vpn_base,
            asid: VMID,
            page_size: line.size,
            nested: true,
            payload: TlbBlockPayload { pfns: line.pfns },
        });
        self.counters.record_outcome(outcome);
        Ok(())
    }

    /// Guest leaf PTE with its walk counters (virtualized backends).
    pub fn guest_pte(&self, gva: VirtAddr, asid: Asid) -> Option<Pte> {
        self.virt.as_ref()?.guest.lookup(asid, gva)
    }
}
