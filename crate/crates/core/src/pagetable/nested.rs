use crate::addrspace::{Asid, PageSize, PhysAddr, VirtAddr, PTE_BYTES};
use crate::cachehier::ServicePoint;
use crate::error::Result;
use crate::tlbhier::{SetAssocTlb, TlbEntry};

use super::{Dimension, MemoryPort, PageWalkCaches, RadixPageTable, WalkAccess, WalkResult};

/// Result of translating one guest-physical address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostMapping {
    pub hpa: u64,
    pub size: PageSize,
}

/// Translates guest-physical addresses for the two-dimensional walker.
/// Implementations append whatever they do (nested-TLB hits, host walks)
/// to `out`.
pub trait HostTranslator {
    fn translate_gpa(&mut self, gpa: u64, mem: &mut dyn MemoryPort, out: &mut WalkResult) -> Result<HostMapping>;
}

/// Plain nested paging: nested TLB, then a host radix walk.
pub struct RadixHostTranslator<'a> {
    pub host_pt: &'a RadixPageTable,
    pub pwcs: Option<&'a mut PageWalkCaches>,
    pub nested_tlb: Option<&'a mut SetAssocTlb>,
    pub vmid: Asid,
}

impl HostTranslator for RadixHostTranslator<'_> {
    fn translate_gpa(&mut self, gpa: u64, mem: &mut dyn MemoryPort, out: &mut WalkResult) -> Result<HostMapping> {
        let gva = VirtAddr(gpa);
        if let Some(tlb) = self.nested_tlb.as_deref_mut() {
            if let Some(e) = tlb.probe(gva, self.vmid) {
                out.push(WalkAccess {
                    dim: Dimension::Host,
                    level: 0,
                    pa: gpa,
                    service: ServicePoint::NestedTlb,
                    cycles: tlb.latency,
                });
                return Ok(HostMapping {
                    hpa: e.translate(gva),
                    size: e.page_size,
                });
            }
        }
        let (pte, _) = self.host_pt.walk_into(
            gva,
            self.pwcs.as_deref_mut(),
            mem,
            Dimension::Host,
            &mut |a, _, _| Ok(a),
            out,
        )?;
        if let Some(tlb) = self.nested_tlb.as_deref_mut() {
            tlb.insert(TlbEntry {
                vpn: gva.vpn(pte.size),
                pfn: pte.pfn,
                page_size: pte.size,
                asid: self.vmid,
            });
        }
        Ok(HostMapping {
            hpa: pte.frame_base() + gva.page_offset(pte.size),
            size: pte.size,
        })
    }
}

/// Two-dimensional walk: every guest table read is preceded by a host
/// translation of the entry's guest-physical address, and the final
/// guest-physical address is host-translated too. The result's page size is
/// the smaller of the guest and host page sizes and `leaf_line_pa` is the
/// host-physical line holding the guest leaf PTE.
pub fn nested_walk(
    guest_pt: &RadixPageTable,
    gva: VirtAddr,
    guest_pwcs: Option<&mut PageWalkCaches>,
    host: &mut dyn HostTranslator,
    mem: &mut dyn MemoryPort,
) -> Result<WalkResult> {
    let mut out = WalkResult::default();
    let (pte, entry_hpa) = guest_pt.walk_into(
        gva,
        guest_pwcs,
        mem,
        Dimension::Guest,
        &mut |entry_gpa, mem, out| host.translate_gpa(entry_gpa, mem, out).map(|m| m.hpa),
        &mut out,
    )?;
    out.leaf_line_pa = PhysAddr(entry_hpa & !(PTE_BYTES * 8 - 1));
    let gpa = pte.frame_base() + gva.page_offset(pte.size);
    let host_map = host.translate_gpa(gpa, mem, &mut out)?;
    out.pa = PhysAddr(host_map.hpa);
    out.page_size = Some(pte.size.min(host_map.size));
    debug_assert!(out.pt_accesses() <= 24);
    Ok(out)
}

/// One-dimensional walk of a pre-merged shadow table. Identical in cost
/// structure to a native walk.
pub fn shadow_walk(
    shadow_pt: &RadixPageTable,
    gva: VirtAddr,
    pwcs: Option<&mut PageWalkCaches>,
    mem: &mut dyn MemoryPort,
) -> Result<WalkResult> {
    shadow_pt.walk(gva, pwcs, mem)
}
