//! Simulated physical placement: frame allocators and page-size assignment.

use crate::addrspace::PageSize;

/// Base of the region holding 4 KiB data frames.
pub const DATA_4K_BASE: u64 = 1 << 32;
/// Base of the region holding 2 MiB data frames.
pub const DATA_2M_BASE: u64 = 1 << 41;
/// Base of the region holding page-table nodes.
pub const PT_NODE_BASE: u64 = 1 << 43;
/// Base of the region reserved for the software-managed TLB table.
pub const POM_TLB_BASE: u64 = 1 << 44;

/// Every region spans 1 TiB; this bounds the shuffle domain.
const REGION_BYTES_LOG2: u32 = 40;

/// Hands out frames of one size from a dedicated region, either
/// sequentially or in a seeded pseudo-random order with no repeats. Shuffled
/// frames are scattered over a pool at the start of the region; once the
/// pool is used up allocation continues sequentially past it.
#[derive(Debug, Clone)]
pub struct FrameAllocator {
    base: u64,
    frame_shift: u32,
    domain_bits: u32,
    next: u64,
    shuffle: Option<u64>,
}

impl FrameAllocator {
    pub fn new(base: u64, size: PageSize, shuffle: Option<u64>) -> Self {
        Self::with_shift(base, size.shift(), shuffle)
    }

    pub fn with_shift(base: u64, frame_shift: u32, shuffle: Option<u64>) -> Self {
        Self {
            base,
            frame_shift,
            domain_bits: REGION_BYTES_LOG2 - frame_shift,
            next: 0,
            shuffle,
        }
    }

    /// Limits the shuffle to the first `bytes` of the region (rounded down
    /// to a power of two, at least one frame).
    pub fn with_pool(mut self, bytes: u64) -> Self {
        let frames = (bytes >> self.frame_shift).max(1);
        self.domain_bits = frames.ilog2().min(REGION_BYTES_LOG2 - self.frame_shift);
        self
    }

    pub fn data_4k(shuffle: Option<u64>) -> Self {
        Self::new(DATA_4K_BASE, PageSize::Size4K, shuffle)
    }

    pub fn data_2m(shuffle: Option<u64>) -> Self {
        Self::new(DATA_2M_BASE, PageSize::Size2M, shuffle)
    }

    pub fn page_table_nodes() -> Self {
        Self::new(PT_NODE_BASE, PageSize::Size4K, None)
    }

    pub fn allocated(&self) -> u64 {
        self.next
    }

    /// Returns the byte address of a fresh frame.
    pub fn alloc(&mut self) -> u64 {
        let i = self.next;
        self.next += 1;
        assert!(i < 1 << (REGION_BYTES_LOG2 - self.frame_shift), "frame region exhausted");
        let slot = match self.shuffle {
            Some(seed) if i < 1 << self.domain_bits => permute(i, seed, self.domain_bits),
            _ => i,
        };
        self.base + (slot << self.frame_shift)
    }
}

/// Bijection on `bits`-wide integers built from invertible steps
/// (odd multiply, xor-shift, add) so that no two inputs collide.
fn permute(x: u64, seed: u64, bits: u32) -> u64 {
    let m = (1u64 << bits) - 1;
    let mut v = x & m;
    let k = (splitmix64(seed) | 1) & m;
    let add = splitmix64(seed ^ 0x5bd1_e995) & m;
    for _ in 0..3 {
        v = v.wrapping_mul(k | 1) & m;
        v ^= v >> (bits / 2).max(1);
        v = v.wrapping_add(add) & m;
    }
    v
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Decides per aligned 2 MiB region whether it is backed by a large page.
#[derive(Debug, Clone, Copy)]
pub struct PageSizePolicy {
    pub large_fraction: f64,
    pub seed: u64,
}

impl PageSizePolicy {
    pub fn size_for(&self, addr: u64) -> PageSize {
        if self.large_fraction <= 0.0 {
            return PageSize::Size4K;
        }
        if self.large_fraction >= 1.0 {
            return PageSize::Size2M;
        }
        let region = addr >> PageSize::Size2M.shift();
        let h = splitmix64(region ^ splitmix64(self.seed));
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.large_fraction {
            PageSize::Size2M
        } else {
            PageSize::Size4K
        }
    }
}
