//! Four-level radix page tables, page-walk caches and the sequential walkers
//! (native, two-dimensional nested, and shadow).

mod alloc;
mod nested;
mod pwc;

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

pub use alloc::{
    splitmix64, FrameAllocator, PageSizePolicy, DATA_2M_BASE, DATA_4K_BASE, POM_TLB_BASE, PT_NODE_BASE,
};
pub use nested::{nested_walk, shadow_walk, HostMapping, HostTranslator, RadixHostTranslator};
pub use pwc::{PageWalkCaches, PwcConfig};

use crate::addrspace::{radix_index, PageSize, PhysAddr, VirtAddr, ENTRIES_PER_TABLE, PTE_BYTES, RADIX_LEVELS};
use crate::cachehier::{CacheHierarchy, ServicePoint};
use crate::error::{Error, Result};

pub const PTW_FREQ_MAX: u8 = 7;
pub const PTW_COST_MAX: u8 = 15;

/// Leaf page-table entry with the two walk counters kept in its unused bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pte {
    /// Frame base address >> 12, for both page sizes.
    pub pfn: u64,
    pub size: PageSize,
    /// Walks that fetched this PTE, saturating at 7.
    pub ptw_freq: u8,
    /// Walks that needed at least one DRAM access, saturating at 15.
    pub ptw_cost: u8,
}

impl Pte {
    pub fn new(pfn: u64, size: PageSize) -> Self {
        Self {
            pfn,
            size,
            ptw_freq: 0,
            ptw_cost: 0,
        }
    }

    pub fn frame_base(&self) -> u64 {
        self.pfn << 12
    }
}

/// Saturating counter update run once per completed walk that fetched `pte`.
pub fn update_ptw_counters(pte: &mut Pte, dram_access_count: u32) {
    pte.ptw_freq = (pte.ptw_freq + 1).min(PTW_FREQ_MAX);
    if dram_access_count >= 1 {
        pte.ptw_cost = (pte.ptw_cost + 1).min(PTW_COST_MAX);
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Empty,
    Table(u32),
    Leaf(Pte),
}

#[derive(Debug, Clone)]
struct Node {
    pa: u64,
    slots: Box<[Slot]>,
}

/// Physical addresses of page-table nodes created by one `map` call.
pub type NewTables = ArrayVec<u64, { RADIX_LEVELS - 1 }>;

/// The eight PTEs sharing one cache line around a leaf entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeafLine {
    pub line_pa: PhysAddr,
    pub size: PageSize,
    /// First VPN (in `size` units) covered by the line.
    pub vpn_base: u64,
    /// Frame numbers of present leaves of `size`; `None` otherwise.
    pub pfns: [Option<u64>; 8],
}

#[derive(Debug, Clone)]
pub struct RadixPageTable {
    nodes: Vec<Node>,
    node_frames: FrameAllocator,
    mapped_pages: u64,
}

impl RadixPageTable {
    /// A table whose nodes are placed by `node_frames`.
    pub fn new(mut node_frames: FrameAllocator) -> Self {
        let root = Node {
            pa: node_frames.alloc(),
            slots: vec![Slot::Empty; ENTRIES_PER_TABLE].into_boxed_slice(),
        };
        Self {
            nodes: vec![root],
            node_frames,
            mapped_pages: 0,
        }
    }

    pub fn root_pa(&self) -> PhysAddr {
        PhysAddr(self.nodes[0].pa)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn mapped_pages(&self) -> u64 {
        self.mapped_pages
    }

    pub fn node_pa(&self, node: u32) -> u64 {
        self.nodes[node as usize].pa
    }

    /// Maps `vpn` (in `size` units) to the frame `pfn` (4 KiB units).
    /// Returns the physical addresses of any interior nodes created.
    pub fn map(&mut self, vpn: u64, pfn: u64, size: PageSize) -> Result<NewTables> {
        let va = vpn << size.shift();
        let leaf_level = size.walk_levels() - 1;
        let mut new_tables = NewTables::new();
        let mut node = 0u32;
        for level in 0..leaf_level {
            let idx = radix_index(va, level);
            node = match self.nodes[node as usize].slots[idx] {
                Slot::Table(next) => next,
                Slot::Empty => {
                    let next = self.nodes.len() as u32;
                    let pa = self.node_frames.alloc();
                    self.nodes.push(Node {
                        pa,
                        slots: vec![Slot::Empty; ENTRIES_PER_TABLE].into_boxed_slice(),
                    });
                    self.nodes[node as usize].slots[idx] = Slot::Table(next);
                    new_tables.push(pa);
                    next
                }
                Slot::Leaf(_) => {
                    return Err(Error::Mapping {
                        vpn,
                        size,
                        reason: "region already mapped by a large page",
                    })
                }
            };
        }
        let idx = radix_index(va, leaf_level);
        let slot = &mut self.nodes[node as usize].slots[idx];
        match slot {
            Slot::Table(_) => {
                return Err(Error::Mapping {
                    vpn,
                    size,
                    reason: "region already holds small-page mappings",
                })
            }
            Slot::Empty => self.mapped_pages += 1,
            Slot::Leaf(_) => {}
        }
        *slot = Slot::Leaf(Pte::new(pfn, size));
        Ok(new_tables)
    }

    fn find_leaf(&self, va: u64) -> Option<(u32, usize)> {
        let mut node = 0u32;
        for level in 0..RADIX_LEVELS {
            let idx = radix_index(va, level);
            match self.nodes[node as usize].slots[idx] {
                Slot::Table(next) => node = next,
                Slot::Leaf(_) => return Some((node, idx)),
                Slot::Empty => return None,
            }
        }
        None
    }

    pub fn lookup(&self, va: VirtAddr) -> Option<Pte> {
        let (node, idx) = self.find_leaf(va.0)?;
        match self.nodes[node as usize].slots[idx] {
            Slot::Leaf(pte) => Some(pte),
            _ => None,
        }
    }

    /// Functional translation with no timing.
    pub fn translate(&self, va: VirtAddr) -> Option<PhysAddr> {
        self.lookup(va)
            .map(|pte| PhysAddr(pte.frame_base() + va.page_offset(pte.size)))
    }

    pub fn leaf_mut(&mut self, va: VirtAddr) -> Option<&mut Pte> {
        let (node, idx) = self.find_leaf(va.0)?;
        match &mut self.nodes[node as usize].slots[idx] {
            Slot::Leaf(pte) => Some(pte),
            _ => None,
        }
    }

    /// The cache line holding the leaf PTE of `va` together with its seven
    /// neighbours.
    pub fn leaf_line(&self, va: VirtAddr) -> Option<LeafLine> {
        let (node, idx) = self.find_leaf(va.0)?;
        let n = &self.nodes[node as usize];
        let Slot::Leaf(pte) = n.slots[idx] else {
            return None;
        };
        let first = idx & !7;
        let mut pfns = [None; 8];
        for (i, p) in pfns.iter_mut().enumerate() {
            if let Slot::Leaf(l) = n.slots[first + i] {
                if l.size == pte.size {
                    *p = Some(l.pfn);
                }
            }
        }
        Some(LeafLine {
            line_pa: PhysAddr(n.pa + first as u64 * PTE_BYTES),
            size: pte.size,
            vpn_base: va.vpn(pte.size) & !7,
            pfns,
        })
    }

    /// Sequential walk of a native (or shadow) table.
    pub fn walk(
        &self,
        va: VirtAddr,
        pwcs: Option<&mut PageWalkCaches>,
        mem: &mut dyn MemoryPort,
    ) -> Result<WalkResult> {
        let mut out = WalkResult::default();
        let (pte, entry_pa) =
            self.walk_into(va, pwcs, mem, Dimension::Native, &mut |a, _, _| Ok(a), &mut out)?;
        out.leaf_line_pa = PhysAddr(entry_pa & !(PTE_BYTES * 8 - 1));
        out.finish(va, &pte);
        Ok(out)
    }

    /// Core walker. `resolve` turns the table-space address of each entry
    /// into the physical address that is actually read; for a native table
    /// it is the identity, for a guest table it performs a host translation.
    /// Returns the leaf PTE and the physical address it was read from.
    pub(crate) fn walk_into(
        &self,
        va: VirtAddr,
        mut pwcs: Option<&mut PageWalkCaches>,
        mem: &mut dyn MemoryPort,
        dim: Dimension,
        resolve: &mut dyn FnMut(u64, &mut dyn MemoryPort, &mut WalkResult) -> Result<u64>,
        out: &mut WalkResult,
    ) -> Result<(Pte, u64)> {
        let mut node = 0u32;
        for level in 0..RADIX_LEVELS {
            if level < RADIX_LEVELS - 1 {
                if let Some(pwc) = pwcs.as_deref_mut() {
                    if let Some(next) = pwc.lookup(va.0, level) {
                        let n = &self.nodes[node as usize];
                        let entry = n.pa + radix_index(va.0, level) as u64 * PTE_BYTES;
                        out.push(WalkAccess {
                            dim,
                            level: level as u8,
                            pa: entry,
                            service: ServicePoint::Pwc,
                            cycles: pwc.latency,
                        });
                        node = next;
                        continue;
                    }
                }
            }
            let n = &self.nodes[node as usize];
            let idx = radix_index(va.0, level);
            let entry = n.pa + idx as u64 * PTE_BYTES;
            let pa = resolve(entry, mem, out)?;
            let (service, cycles) = mem.read_pt(PhysAddr(pa));
            out.push(WalkAccess {
                dim,
                level: level as u8,
                pa,
                service,
                cycles,
            });
            match n.slots[idx] {
                Slot::Table(next) => {
                    if level < RADIX_LEVELS - 1 {
                        if let Some(pwc) = pwcs.as_deref_mut() {
                            pwc.fill(va.0, level, next);
                        }
                    }
                    node = next;
                }
                Slot::Leaf(pte) => return Ok((pte, pa)),
                Slot::Empty => return Err(Error::PageFault { addr: va.0 }),
            }
        }
        Err(Error::PageFault { addr: va.0 })
    }
}

/// Where page-table reads are served from.
pub trait MemoryPort {
    /// Reads one page-table entry; returns where it was found and the
    /// latency of the access.
    fn read_pt(&mut self, pa: PhysAddr) -> (ServicePoint, u32);

    /// The cache hierarchy behind this port, for walkers that also probe
    /// TLB blocks.
    fn as_caches(&mut self) -> Option<&mut CacheHierarchy> {
        None
    }
}

/// Memory with a fixed latency and no caching.
#[derive(Debug, Clone, Copy)]
pub struct FlatMemory {
    pub latency: u32,
}

impl MemoryPort for FlatMemory {
    fn read_pt(&mut self, _pa: PhysAddr) -> (ServicePoint, u32) {
        (ServicePoint::Dram, self.latency)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dimension {
    Native,
    Guest,
    Host,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkAccess {
    pub dim: Dimension,
    pub level: u8,
    pub pa: u64,
    pub service: ServicePoint,
    pub cycles: u32,
}

impl WalkAccess {
    /// True for references to page-table memory (including PWC hits), false
    /// for translation-structure lookups such as nested-TLB hits.
    pub fn is_pt_access(&self) -> bool {
        !matches!(self.service, ServicePoint::NestedTlb | ServicePoint::L2TlbBlock)
    }
}

/// Upper bound on recorded steps: 24 page-table references plus the
/// nested-TLB / TLB-block lookups of a two-dimensional walk.
pub const MAX_WALK_STEPS: usize = 32;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WalkResult {
    pub pa: PhysAddr,
    pub page_size: Option<PageSize>,
    pub leaf_line_pa: PhysAddr,
    pub accesses: ArrayVec<WalkAccess, MAX_WALK_STEPS>,
    pub total_cycles: u64,
    pub dram_access_count: u32,
}

impl WalkResult {
    pub(crate) fn push(&mut self, access: WalkAccess) {
        self.total_cycles += access.cycles as u64;
        if access.service == ServicePoint::Dram {
            self.dram_access_count += 1;
        }
        self.accesses.push(access);
    }

    pub(crate) fn finish(&mut self, va: VirtAddr, pte: &Pte) {
        self.pa = PhysAddr(pte.frame_base() + va.page_offset(pte.size));
        self.page_size = Some(pte.size);
    }

    pub fn pt_accesses(&self) -> usize {
        self.accesses.iter().filter(|a| a.is_pt_access()).count()
    }

    pub fn pt_accesses_in(&self, dim: Dimension) -> usize {
        self.accesses
            .iter()
            .filter(|a| a.is_pt_access() && a.dim == dim)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cachehier::ServicePoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn table() -> RadixPageTable {
        RadixPageTable::new(FrameAllocator::page_table_nodes())
    }

    #[test]
    fn map_then_walk() {
        let mut pt = table();
        pt.map(5, 77, PageSize::Size4K).unwrap();
        let r = pt
            .walk(VirtAddr(5 * 4096 + 12), None, &mut FlatMemory { latency: 150 })
            .unwrap();
        assert_eq!(r.pa, PhysAddr(77 * 4096 + 12));
        assert_eq!(r.accesses.len(), 4);
        assert_eq!(r.total_cycles, 4 * 150);
        assert_eq!(r.dram_access_count, 4);
    }

    #[test]
    fn large_page_walk_terminates_at_level_three() {
        let mut pt = table();
        pt.map(3, 512 * 9, PageSize::Size2M).unwrap();
        let va = VirtAddr((3 << 21) + 0x1234);
        let r = pt.walk(va, None, &mut FlatMemory { latency: 1 }).unwrap();
        assert_eq!(r.accesses.len(), 3);
        assert_eq!(r.pa, PhysAddr(512 * 9 * 4096 + 0x1234));
        assert_eq!(r.page_size, Some(PageSize::Size2M));
    }

    #[test]
    fn conflicting_sizes_rejected() {
        let mut pt = table();
        pt.map(3, 0, PageSize::Size2M).unwrap();
        assert!(matches!(
            pt.map(3 * 512 + 1, 1, PageSize::Size4K),
            Err(Error::Mapping { .. })
        ));
        pt.map(0, 1, PageSize::Size4K).unwrap();
        assert!(pt.map(0, 512, PageSize::Size2M).is_err());
    }

    #[test]
    fn unmapped_walk_faults() {
        let pt = table();
        assert!(matches!(
            pt.walk(VirtAddr(0x1000), None, &mut FlatMemory { latency: 1 }),
            Err(Error::PageFault { addr: 0x1000 })
        ));
    }

    #[test]
    fn new_tables_reported() {
        let mut pt = table();
        assert_eq!(pt.map(0, 1, PageSize::Size4K).unwrap().len(), 3);
        assert_eq!(pt.map(1, 2, PageSize::Size4K).unwrap().len(), 0);
        assert_eq!(pt.node_count(), 4);
    }

    #[test]
    fn accesses_follow_the_tree() {
        let mut pt = table();
        pt.map(0x12345, 9, PageSize::Size4K).unwrap();
        let r = pt
            .walk(VirtAddr(0x12345 << 12), None, &mut FlatMemory { latency: 1 })
            .unwrap();
        // Access k reads inside the node pointed to by access k-1.
        assert_eq!(r.accesses[0].pa & !0xfff, pt.root_pa().0);
        for (k, a) in r.accesses.iter().enumerate() {
            assert_eq!(a.level as usize, k);
            assert_eq!((a.pa & 0xfff) / 8, radix_index(0x12345 << 12, k) as u64);
        }
        assert_eq!(r.leaf_line_pa.0, r.accesses[3].pa & !63);
    }

    #[test]
    fn pwc_hits_cost_two_cycles() {
        struct L2Only;
        impl MemoryPort for L2Only {
            fn read_pt(&mut self, _: PhysAddr) -> (ServicePoint, u32) {
                (ServicePoint::L2, 16)
            }
        }
        let mut pt = table();
        pt.map(0x400, 1, PageSize::Size4K).unwrap();
        let mut pwcs = PageWalkCaches::new(&PwcConfig::default());
        let va = VirtAddr(0x400 << 12);
        pt.walk(va, Some(&mut pwcs), &mut L2Only).unwrap();
        let r = pt.walk(va, Some(&mut pwcs), &mut L2Only).unwrap();
        assert_eq!(r.total_cycles, 3 * 2 + 16);
        assert_eq!(r.accesses.iter().filter(|a| a.service == ServicePoint::Pwc).count(), 3);
    }

    #[test]
    fn leaf_line_groups_eight_ptes() {
        let mut pt = table();
        for v in 0x100..0x106 {
            pt.map(v, v + 1000, PageSize::Size4K).unwrap();
        }
        let line = pt.leaf_line(VirtAddr(0x103 << 12)).unwrap();
        assert_eq!(line.vpn_base, 0x100);
        assert_eq!(line.pfns[5], Some(0x105 + 1000));
        assert_eq!(line.pfns[6], None);
        assert_eq!(line.line_pa.0 % 64, 0);
    }

    #[test]
    fn counters_saturate() {
        let mut pte = Pte::new(0, PageSize::Size4K);
        update_ptw_counters(&mut pte, 0);
        assert_eq!((pte.ptw_freq, pte.ptw_cost), (1, 0));
        let mut hot = Pte {
            ptw_freq: 7,
            ptw_cost: 15,
            ..pte
        };
        update_ptw_counters(&mut hot, 3);
        assert_eq!((hot.ptw_freq, hot.ptw_cost), (7, 15));
        let mut p = Pte::new(0, PageSize::Size4K);
        for _ in 0..20 {
            update_ptw_counters(&mut p, 1);
        }
        assert_eq!((p.ptw_freq, p.ptw_cost), (7, 15));
    }

    #[test]
    fn walk_matches_flat_map_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pt = table();
        let mut oracle = HashMap::new();
        while oracle.len() < 10_000 {
            let vpn = rng.random_range(0..1u64 << 30);
            let pfn = rng.random_range(0..1u64 << 36);
            pt.map(vpn, pfn, PageSize::Size4K).unwrap();
            oracle.insert(vpn, pfn);
        }
        let mut mem = FlatMemory { latency: 1 };
        for (&vpn, &pfn) in &oracle {
            let off = rng.random_range(0..4096);
            let r = pt.walk(VirtAddr((vpn << 12) | off), None, &mut mem).unwrap();
            assert_eq!(r.pa, PhysAddr((pfn << 12) | off));
        }
    }

    proptest::proptest! {
        #[test]
        fn counters_monotone_and_bounded(drams in proptest::collection::vec(0u32..3, 0..40)) {
            let mut p = Pte::new(0, PageSize::Size4K);
            let mut walks_with_dram = 0u32;
            for (i, d) in drams.iter().enumerate() {
                let before = p;
                update_ptw_counters(&mut p, *d);
                if *d > 0 { walks_with_dram += 1; }
                proptest::prop_assert!(p.ptw_freq >= before.ptw_freq && p.ptw_cost >= before.ptw_cost);
                proptest::prop_assert_eq!(p.ptw_freq as usize, (i + 1).min(7));
                proptest::prop_assert_eq!(p.ptw_cost as u32, walks_with_dram.min(15));
            }
        }
    }
}
