//! Address arithmetic: virtual/physical address decomposition, radix
//! indices, TLB-block coordinates and the aliasing-feasibility check.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bits of virtual address consumed by one radix level.
pub const BITS_PER_LEVEL: u32 = 9;
/// Entries in one page-table node.
pub const ENTRIES_PER_TABLE: usize = 1 << BITS_PER_LEVEL;
/// Radix levels of a 4 KiB walk.
pub const RADIX_LEVELS: usize = 4;
/// Size of a page-table entry in bytes.
pub const PTE_BYTES: u64 = 8;
/// log2 of the 4 KiB base page.
pub const BASE_PAGE_SHIFT: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PageSize {
    #[serde(rename = "4KiB")]
    Size4K,
    #[serde(rename = "2MiB")]
    Size2M,
}

impl PageSize {
    pub const ALL: [PageSize; 2] = [PageSize::Size4K, PageSize::Size2M];

    pub const fn shift(self) -> u32 {
        match self {
            PageSize::Size4K => 12,
            PageSize::Size2M => 21,
        }
    }

    pub const fn bytes(self) -> u64 {
        1 << self.shift()
    }

    /// Number of radix levels a walk visits before reaching the leaf.
    pub const fn walk_levels(self) -> usize {
        match self {
            PageSize::Size4K => 4,
            PageSize::Size2M => 3,
        }
    }

    pub fn from_bytes(bytes: u64) -> Result<Self> {
        match bytes {
            4096 => Ok(PageSize::Size4K),
            0x20_0000 => Ok(PageSize::Size2M),
            other => Err(Error::config(format!("unsupported page size {other} bytes"))),
        }
    }
}

impl fmt::Display for PageSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PageSize::Size4K => f.write_str("4KiB"),
            PageSize::Size2M => f.write_str("2MiB"),
        }
    }
}

/// Address widths and line geometry shared by every structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MachineSpec {
    pub va_bits: u32,
    pub pa_bits: u32,
    pub cache_line_bytes: u64,
}

impl Default for MachineSpec {
    fn default() -> Self {
        Self {
            va_bits: 48,
            pa_bits: 52,
            cache_line_bytes: 64,
        }
    }
}

impl MachineSpec {
    pub fn radix_levels(&self) -> usize {
        RADIX_LEVELS
    }

    pub fn ptes_per_line(&self) -> u64 {
        self.cache_line_bytes / PTE_BYTES
    }

    pub fn va_mask(&self) -> u64 {
        mask(self.va_bits)
    }

    pub fn pa_mask(&self) -> u64 {
        mask(self.pa_bits)
    }

    pub fn validate(&self) -> Result<()> {
        if self.va_bits < BASE_PAGE_SHIFT + 3 || self.va_bits > 64 {
            return Err(Error::config(format!("va_bits {} out of range", self.va_bits)));
        }
        if self.pa_bits < BASE_PAGE_SHIFT || self.pa_bits > 64 {
            return Err(Error::config(format!("pa_bits {} out of range", self.pa_bits)));
        }
        if !self.cache_line_bytes.is_power_of_two() || self.cache_line_bytes < PTE_BYTES {
            return Err(Error::config(format!(
                "cache_line_bytes {} must be a power of two >= {PTE_BYTES}",
                self.cache_line_bytes
            )));
        }
        Ok(())
    }

    /// ASID bits available in a TLB-block tag for an L2 with `num_sets` sets.
    pub fn asid_bits_available(&self, num_sets: u64) -> Result<u32> {
        crate::cachehier::derive_tag_widths(self, num_sets).map(|w| w.asid_bits)
    }
}

fn mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct VirtAddr(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct PhysAddr(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Asid(pub u16);

impl VirtAddr {
    pub fn new(raw: u64, spec: &MachineSpec) -> Result<Self> {
        if raw & !spec.va_mask() != 0 {
            return Err(Error::config(format!(
                "virtual address {raw:#x} exceeds {} bits",
                spec.va_bits
            )));
        }
        Ok(VirtAddr(raw))
    }

    pub fn vpn(self, size: PageSize) -> u64 {
        self.0 >> size.shift()
    }

    /// VPN in 4 KiB units, the key used by TLB maintenance commands.
    pub fn vpn4k(self) -> u64 {
        self.0 >> BASE_PAGE_SHIFT
    }

    pub fn page_offset(self, size: PageSize) -> u64 {
        self.0 & (size.bytes() - 1)
    }
}

impl PhysAddr {
    pub fn new(raw: u64, spec: &MachineSpec) -> Result<Self> {
        if raw & !spec.pa_mask() != 0 {
            return Err(Error::config(format!(
                "physical address {raw:#x} exceeds {} bits",
                spec.pa_bits
            )));
        }
        Ok(PhysAddr(raw))
    }

    pub fn line(self, line_bytes: u64) -> PhysAddr {
        PhysAddr(self.0 & !(line_bytes - 1))
    }

    pub fn offset(self, by: u64) -> PhysAddr {
        PhysAddr(self.0 + by)
    }
}

impl fmt::Display for VirtAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl fmt::Display for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// A virtual address split into radix indices and page offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VaParts {
    pub vpn: u64,
    pub page_offset: u64,
    /// Root-first radix indices. For 2 MiB pages only the first three are
    /// meaningful and the fourth is zero.
    pub indices: [u16; RADIX_LEVELS],
    pub page_size: PageSize,
}

impl VaParts {
    pub fn levels(&self) -> &[u16] {
        &self.indices[..self.page_size.walk_levels()]
    }
}

/// Radix index of `va` at `level` (0 = root) of a four-level table.
pub fn radix_index(va: u64, level: usize) -> usize {
    let shift = BASE_PAGE_SHIFT + BITS_PER_LEVEL * (RADIX_LEVELS - 1 - level) as u32;
    ((va >> shift) & (ENTRIES_PER_TABLE as u64 - 1)) as usize
}

pub fn decompose_va(va: VirtAddr, page_size: PageSize) -> VaParts {
    let mut indices = [0u16; RADIX_LEVELS];
    for (level, idx) in indices.iter_mut().enumerate().take(page_size.walk_levels()) {
        *idx = radix_index(va.0, level) as u16;
    }
    VaParts {
        vpn: va.vpn(page_size),
        page_offset: va.page_offset(page_size),
        indices,
        page_size,
    }
}

pub fn reassemble(parts: &VaParts) -> VirtAddr {
    let mut va = parts.page_offset;
    for (level, &idx) in parts.levels().iter().enumerate() {
        let shift = BASE_PAGE_SHIFT + BITS_PER_LEVEL * (RADIX_LEVELS - 1 - level) as u32;
        va |= (idx as u64) << shift;
    }
    VirtAddr(va)
}

/// Location of a translation inside the L2 cache when stored as a TLB block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TlbBlockCoords {
    pub pte_slot: usize,
    pub set_index: usize,
    pub block_tag: u64,
}

/// Eight consecutive VPNs share one TLB block; the low three VPN bits pick
/// the PTE slot and the remaining bits index and tag the cache.
pub fn tlb_block_coords(vpn: u64, num_sets: u64) -> TlbBlockCoords {
    debug_assert!(num_sets.is_power_of_two());
    let group = vpn >> 3;
    TlbBlockCoords {
        pte_slot: (vpn & 7) as usize,
        set_index: (group & (num_sets - 1)) as usize,
        block_tag: group >> num_sets.trailing_zeros(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AliasFeasibility {
    pub feasible: bool,
    /// Tag bits left over once the TLB-block tag is stored in the data tag
    /// field. Zero when infeasible.
    pub spare_bits: u32,
}

/// A VA-tagged block fits the physical tag field iff `pa_bits > va_bits - 9`
/// (64-byte lines holding eight PTEs). The set count cancels out of the
/// difference but is kept in the signature to mirror the tag derivation.
pub fn alias_feasibility(va_bits: u32, pa_bits: u32, num_sets: u64, line_bytes: u64) -> AliasFeasibility {
    let set_bits = num_sets.trailing_zeros() as i64;
    let line_bits = line_bytes.trailing_zeros() as i64;
    let ptes_bits = (line_bytes / PTE_BYTES).trailing_zeros() as i64;
    let data_tag = pa_bits as i64 - set_bits - line_bits;
    let tlb_tag = va_bits as i64 - BASE_PAGE_SHIFT as i64 - set_bits - ptes_bits;
    let spare = data_tag - tlb_tag;
    AliasFeasibility {
        feasible: spare > 0,
        spare_bits: spare.max(0) as u32,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decompose_known_address() {
        let parts = decompose_va(VirtAddr(0x0000_0000_0040_1000), PageSize::Size4K);
        assert_eq!(parts.indices, [0, 0, 2, 1]);
        assert_eq!(parts.page_offset, 0);
        assert_eq!(parts.vpn, 0x401);
    }

    #[test]
    fn decompose_zero() {
        let parts = decompose_va(VirtAddr(0), PageSize::Size4K);
        assert_eq!(parts.vpn, 0);
        assert_eq!(parts.indices, [0; 4]);
        assert_eq!(parts.page_offset, 0);
    }

    #[test]
    fn large_page_walk_has_three_levels() {
        let va = VirtAddr((3 << 30) | (5 << 21) | 0x1234);
        let parts = decompose_va(va, PageSize::Size2M);
        assert_eq!(parts.levels(), &[0, 3, 5]);
        assert_eq!(parts.page_offset, 0x1234);
        assert_eq!(reassemble(&parts), va);
    }

    #[test]
    fn random_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MachineSpec::default();
        for _ in 0..1000 {
            let va = VirtAddr(rng.random::<u64>() & spec.va_mask());
            for size in PageSize::ALL {
                assert_eq!(reassemble(&decompose_va(va, size)), va);
            }
        }
    }

    #[test]
    fn block_coords_known_vpn() {
        let c = tlb_block_coords(0x1_2345_6789, 1024);
        assert_eq!(c.pte_slot, 1);
        assert_eq!(c.set_index, 0xF1);
        assert_eq!(c.block_tag, 0x91A2B);
        let z = tlb_block_coords(0, 1024);
        assert_eq!((z.pte_slot, z.set_index, z.block_tag), (0, 0, 0));
    }

    #[test]
    fn block_coords_constant_on_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let vpn = rng.random::<u64>() >> 28;
            let base = tlb_block_coords(vpn & !7, 2048);
            for v in (vpn & !7)..=(vpn | 7) {
                let c = tlb_block_coords(v, 2048);
                assert_eq!((c.set_index, c.block_tag), (base.set_index, base.block_tag));
                assert_eq!(c.pte_slot as u64, v & 7);
            }
        }
    }

    #[test]
    fn alias_cases() {
        let a = alias_feasibility(48, 52, 1024, 64);
        assert!(a.feasible);
        assert!(a.spare_bits >= 11);
        let b = alias_feasibility(57, 52, 1024, 64);
        assert!(b.feasible);
        assert_eq!(b.spare_bits, 4);
        let c = alias_feasibility(60, 50, 1024, 64);
        assert!(!c.feasible);
        assert_eq!(c.spare_bits, 0);
    }

    #[test]
    fn address_width_checked() {
        let spec = MachineSpec::default();
        assert!(VirtAddr::new(1 << 48, &spec).is_err());
        assert!(VirtAddr::new((1 << 48) - 1, &spec).is_ok());
        assert!(PhysAddr::new(1 << 52, &spec).is_err());
        assert!(PageSize::from_bytes(1 << 30).is_err());
    }

    proptest::proptest! {
        #[test]
        fn decompose_is_bijective(raw in 0u64..(1 << 48)) {
            for size in PageSize::ALL {
                proptest::prop_assert_eq!(reassemble(&decompose_va(VirtAddr(raw), size)), VirtAddr(raw));
            }
        }

        #[test]
        fn block_coords_injective_across_groups(a in 0u64..(1 << 36), b in 0u64..(1 << 36)) {
            let (ca, cb) = (tlb_block_coords(a, 2048), tlb_block_coords(b, 2048));
            let same = (ca.set_index, ca.block_tag) == (cb.set_index, cb.block_tag);
            proptest::prop_assert_eq!(same, a >> 3 == b >> 3);
        }
    }
}
