//! Per-ASID page tables populated on first touch.

use std::collections::HashMap;

use crate::addrspace::{Asid, PageSize, VirtAddr};
use crate::error::{Error, Result};
use crate::pagetable::{FrameAllocator, PageSizePolicy, Pte, RadixPageTable, DATA_2M_BASE, DATA_4K_BASE, PT_NODE_BASE};

/// Each table's nodes get a private 2 GiB slice of the node region.
const TABLE_SLOT_SHIFT: u32 = 31;
/// Slots available in the 1 TiB node region.
pub(crate) const TABLE_SLOTS: u64 = 1 << (40 - TABLE_SLOT_SHIFT);

/// A physical page created while mapping: a data frame or a table node.
pub(crate) type FreshPage = (u64, PageSize);

#[derive(Debug, Clone)]
pub(crate) struct Space {
    tables: HashMap<Asid, RadixPageTable>,
    frames_4k: FrameAllocator,
    frames_2m: FrameAllocator,
    policy: PageSizePolicy,
    /// Added to the ASID to pick the node slot.
    slot_offset: u64,
}

impl Space {
    pub fn new(seed: u64, large_fraction: f64, slot_offset: u64, pool_bytes: u64) -> Self {
        Self {
            tables: HashMap::new(),
            frames_4k: FrameAllocator::new(DATA_4K_BASE, PageSize::Size4K, Some(seed)).with_pool(pool_bytes),
            frames_2m: FrameAllocator::new(DATA_2M_BASE, PageSize::Size2M, Some(seed ^ 0x2d2d)).with_pool(pool_bytes),
            policy: PageSizePolicy { large_fraction, seed },
            slot_offset,
        }
    }

    pub fn table(&self, asid: Asid) -> Option<&RadixPageTable> {
        self.tables.get(&asid)
    }

    pub fn tables_mut(&mut self) -> &mut HashMap<Asid, RadixPageTable> {
        &mut self.tables
    }

    pub fn lookup(&self, asid: Asid, va: VirtAddr) -> Option<Pte> {
        self.tables.get(&asid)?.lookup(va)
    }

    pub fn table_or_create(&mut self, asid: Asid, fresh: &mut Vec<FreshPage>) -> Result<&mut RadixPageTable> {
        table_entry(&mut self.tables, self.slot_offset, asid, fresh)
    }

    /// Maps the page holding `va` if it is absent: one large page, or the
    /// whole aligned group of eight small pages. New data frames and table
    /// nodes are appended to `fresh`.
    pub fn ensure_mapped(&mut self, asid: Asid, va: VirtAddr, fresh: &mut Vec<FreshPage>) -> Result<()> {
        if self.lookup(asid, va).is_some() {
            return Ok(());
        }
        let size = self.policy.size_for(va.0);
        let table = table_entry(&mut self.tables, self.slot_offset, asid, fresh)?;
        let (first, count, frames) = match size {
            PageSize::Size2M => (va.vpn(size), 1, &mut self.frames_2m),
            PageSize::Size4K => (va.vpn4k() & !7, 8, &mut self.frames_4k),
        };
        for vpn in first..first + count {
            if table.lookup(VirtAddr(vpn << size.shift())).is_some() {
                continue;
            }
            let frame = frames.alloc();
            let nodes = table.map(vpn, frame >> 12, size)?;
            fresh.extend(nodes.iter().map(|&n| (n, PageSize::Size4K)));
            fresh.push((frame, size));
        }
        Ok(())
    }
}

fn table_entry<'a>(
    tables: &'a mut HashMap<Asid, RadixPageTable>,
    slot_offset: u64,
    asid: Asid,
    fresh: &mut Vec<FreshPage>,
) -> Result<&'a mut RadixPageTable> {
    let slot = asid.0 as u64 + slot_offset;
    if slot >= TABLE_SLOTS {
        return Err(Error::config(format!("ASID {} exceeds the supported table count", asid.0)));
    }
    Ok(tables.entry(asid).or_insert_with(|| {
        let t = RadixPageTable::new(FrameAllocator::new(
            PT_NODE_BASE + (slot << TABLE_SLOT_SHIFT),
            PageSize::Size4K,
            None,
        ));
        fresh.push((t.root_pa().0, PageSize::Size4K));
        t
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_pages_map_whole_group() {
        let mut s = Space::new(1, 0.0, 0, 1 << 34);
        let mut fresh = Vec::new();
        s.ensure_mapped(Asid(3), VirtAddr(0x5000), &mut fresh).unwrap();
        // Root, three interior nodes, eight frames.
        assert_eq!(fresh.len(), 12);
        for p in 0..8u64 {
            assert!(s.lookup(Asid(3), VirtAddr(p << 12)).is_some());
        }
        assert!(s.lookup(Asid(3), VirtAddr(8 << 12)).is_none());
        fresh.clear();
        s.ensure_mapped(Asid(3), VirtAddr(0x7fff), &mut fresh).unwrap();
        assert!(fresh.is_empty());
    }

    #[test]
    fn large_pages_and_distinct_tables() {
        let mut s = Space::new(1, 1.0, 0, 1 << 34);
        let mut fresh = Vec::new();
        s.ensure_mapped(Asid(0), VirtAddr(0x20_0000), &mut fresh).unwrap();
        s.ensure_mapped(Asid(1), VirtAddr(0x20_0000), &mut fresh).unwrap();
        let a = s.lookup(Asid(0), VirtAddr(0x20_0000)).unwrap();
        let b = s.lookup(Asid(1), VirtAddr(0x20_0000)).unwrap();
        assert_eq!(a.size, PageSize::Size2M);
        assert_ne!(a.pfn, b.pfn);
        assert_ne!(s.table(Asid(0)).unwrap().root_pa(), s.table(Asid(1)).unwrap().root_pa());
    }

    #[test]
    fn asid_beyond_slots_is_rejected() {
        let mut s = Space::new(1, 0.0, 1, 1 << 34);
        let r = s.ensure_mapped(Asid(TABLE_SLOTS as u16 - 1), VirtAddr(0), &mut Vec::new());
        assert!(r.is_err());
    }
}
