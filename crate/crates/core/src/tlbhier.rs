//! The MMU's TLB arrays: L1 I-TLB, split L1 D-TLBs, unified L2 TLB and the
//! nested TLB, plus epoch-based MPKI tracking.

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::addrspace::{Asid, PageSize, VirtAddr, BASE_PAGE_SHIFT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    InstrFetch,
    Load,
    Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TlbEntry {
    /// Virtual page number in units of `page_size`.
    pub vpn: u64,
    /// Frame base >> 12.
    pub pfn: u64,
    pub page_size: PageSize,
    pub asid: Asid,
}

impl TlbEntry {
    pub fn translate(&self, va: VirtAddr) -> u64 {
        (self.pfn << BASE_PAGE_SHIFT) + va.page_offset(self.page_size)
    }

    /// Inclusive range of 4 KiB VPNs covered by this entry.
    pub fn vpn4k_range(&self) -> (u64, u64) {
        let k = self.page_size.shift() - BASE_PAGE_SHIFT;
        let lo = self.vpn << k;
        (lo, lo + (1 << k) - 1)
    }
}

/// Which translations an invalidation removes. VPNs are in 4 KiB units and
/// ranges are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InvalidationScope {
    All,
    ByAsid(Asid),
    ByVa { vpn: u64, asid: Asid },
    ByRange { lo: u64, hi: u64, asid: Asid },
}

impl InvalidationScope {
    pub fn matches(&self, e: &TlbEntry) -> bool {
        let (lo, hi) = e.vpn4k_range();
        match *self {
            InvalidationScope::All => true,
            InvalidationScope::ByAsid(a) => e.asid == a,
            InvalidationScope::ByVa { vpn, asid } => e.asid == asid && (lo..=hi).contains(&vpn),
            InvalidationScope::ByRange { lo: a, hi: b, asid } => e.asid == asid && lo <= b && a <= hi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlbArrayConfig {
    pub entries: usize,
    pub ways: usize,
    pub latency: u32,
}

impl TlbArrayConfig {
    pub const fn new(entries: usize, ways: usize, latency: u32) -> Self {
        Self { entries, ways, latency }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.ways == 0 || self.entries == 0 || !self.entries.is_multiple_of(self.ways) {
            return Err(Error::config(format!(
                "{name}: {} entries not divisible into {} ways",
                self.entries, self.ways
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Way {
    entry: TlbEntry,
    stamp: u64,
}

/// A set-associative, LRU-replaced TLB array. Arrays that hold several page
/// sizes index each size with its own VPN.
#[derive(Debug, Clone)]
pub struct SetAssocTlb {
    sets: usize,
    ways: usize,
    sizes: ArrayVec<PageSize, 2>,
    slots: Vec<Option<Way>>,
    pub latency: u32,
    clock: u64,
}

impl SetAssocTlb {
    pub fn new(cfg: &TlbArrayConfig, sizes: &[PageSize]) -> Self {
        let sets = (cfg.entries / cfg.ways).max(1);
        Self {
            sets,
            ways: cfg.ways,
            sizes: sizes.iter().copied().collect(),
            slots: vec![None; sets * cfg.ways],
            latency: cfg.latency,
            clock: 0,
        }
    }

    pub fn sets(&self) -> usize {
        self.sets
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn holds(&self, size: PageSize) -> bool {
        self.sizes.contains(&size)
    }

    fn set_range(&self, vpn: u64) -> std::ops::Range<usize> {
        let s = (vpn % self.sets as u64) as usize;
        s * self.ways..(s + 1) * self.ways
    }

    /// Probes every supported page size; updates recency on a hit.
    pub fn probe(&mut self, va: VirtAddr, asid: Asid) -> Option<TlbEntry> {
        for i in 0..self.sizes.len() {
            let size = self.sizes[i];
            if let Some(e) = self.probe_size(va.vpn(size), size, asid) {
                return Some(e);
            }
        }
        None
    }

    pub fn probe_size(&mut self, vpn: u64, size: PageSize, asid: Asid) -> Option<TlbEntry> {
        self.clock += 1;
        let now = self.clock;
        let range = self.set_range(vpn);
        self.slots[range].iter_mut().flatten().find_map(|w| {
            let e = w.entry;
            (e.vpn == vpn && e.page_size == size && e.asid == asid).then(|| {
                w.stamp = now;
                e
            })
        })
    }

    /// Read-only residency check that leaves recency untouched.
    pub fn contains(&self, vpn: u64, size: PageSize, asid: Asid) -> bool {
        self.slots[self.set_range(vpn)]
            .iter()
            .flatten()
            .any(|w| w.entry.vpn == vpn && w.entry.page_size == size && w.entry.asid == asid)
    }

    /// Inserts `entry`, returning the LRU entry it displaced, if any. A refill
    /// of a resident key updates it in place.
    pub fn insert(&mut self, entry: TlbEntry) -> Option<TlbEntry> {
        debug_assert!(self.holds(entry.page_size));
        self.clock += 1;
        let now = self.clock;
        let range = self.set_range(entry.vpn);
        let set = &mut self.slots[range];
        if let Some(w) = set.iter_mut().flatten().find(|w| {
            w.entry.vpn == entry.vpn && w.entry.page_size == entry.page_size && w.entry.asid == entry.asid
        }) {
            w.entry = entry;
            w.stamp = now;
            return None;
        }
        let way = match set.iter().position(Option::is_none) {
            Some(free) => free,
            None => set
                .iter()
                .enumerate()
                .min_by_key(|(_, w)| w.map_or(0, |w| w.stamp))
                .map(|(i, _)| i)
                .expect("non-empty set"),
        };
        let evicted = set[way].map(|w| w.entry);
        set[way] = Some(Way { entry, stamp: now });
        evicted
    }

    pub fn invalidate(&mut self, scope: &InvalidationScope) -> usize {
        let mut n = 0;
        for slot in &mut self.slots {
            if slot.is_some_and(|w| scope.matches(&w.entry)) {
                *slot = None;
                n += 1;
            }
        }
        n
    }

    pub fn valid_count(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn entries(&self) -> impl Iterator<Item = &TlbEntry> {
        self.slots.iter().flatten().map(|w| &w.entry)
    }
}

/// Misses per kilo-instruction over fixed instruction epochs. The published
/// value is that of the last completed epoch (0 before the first).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpkiTracker {
    pub epoch_instructions: u64,
    pub misses_this_epoch: u64,
    pub instructions_this_epoch: u64,
    pub current_mpki: f64,
    pub total_misses: u64,
}

impl MpkiTracker {
    pub fn new(epoch_instructions: u64) -> Self {
        Self {
            epoch_instructions: epoch_instructions.max(1),
            misses_this_epoch: 0,
            instructions_this_epoch: 0,
            current_mpki: 0.0,
            total_misses: 0,
        }
    }

    pub fn record_miss(&mut self) {
        self.misses_this_epoch += 1;
        self.total_misses += 1;
    }

    /// Advances epoch accounting by `delta` retired instructions.
    pub fn on_retire(&mut self, delta: u64) {
        self.instructions_this_epoch += delta;
        if self.instructions_this_epoch >= self.epoch_instructions {
            self.current_mpki =
                1000.0 * self.misses_this_epoch as f64 / self.instructions_this_epoch as f64;
            self.misses_this_epoch = 0;
            self.instructions_this_epoch = 0;
        }
    }

    pub fn mpki(&self) -> f64 {
        self.current_mpki
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TlbConfig {
    pub l1i: TlbArrayConfig,
    pub l1d_4k: TlbArrayConfig,
    pub l1d_2m: TlbArrayConfig,
    pub l2: TlbArrayConfig,
    pub nested: TlbArrayConfig,
    pub mpki_epoch_instructions: u64,
}

impl Default for TlbConfig {
    fn default() -> Self {
        Self {
            l1i: TlbArrayConfig::new(128, 8, 1),
            l1d_4k: TlbArrayConfig::new(64, 4, 1),
            l1d_2m: TlbArrayConfig::new(32, 4, 1),
            l2: TlbArrayConfig::new(1536, 12, 12),
            nested: TlbArrayConfig::new(64, 64, 1),
            mpki_epoch_instructions: 100_000,
        }
    }
}

impl TlbConfig {
    pub fn validate(&self) -> Result<()> {
        self.l1i.validate("tlb.l1i")?;
        self.l1d_4k.validate("tlb.l1d_4k")?;
        self.l1d_2m.validate("tlb.l1d_2m")?;
        self.l2.validate("tlb.l2")?;
        // Zero entries disables the nested TLB.
        if self.nested.entries == 0 {
            return Ok(());
        }
        self.nested.validate("tlb.nested")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TlbLevel {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlbHit {
    L1,
    L2,
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbLookup {
    pub hit: TlbHit,
    pub entry: Option<TlbEntry>,
    pub cycles: u32,
}

/// Two-level TLB hierarchy: per-kind L1 arrays and a unified L2.
#[derive(Debug, Clone)]
pub struct TlbHierarchy {
    pub l1i: SetAssocTlb,
    pub l1d_4k: SetAssocTlb,
    pub l1d_2m: SetAssocTlb,
    pub l2: SetAssocTlb,
    pub l1_misses: u64,
    pub l2_tracker: MpkiTracker,
}

impl TlbHierarchy {
    pub fn new(cfg: &TlbConfig) -> Self {
        Self {
            l1i: SetAssocTlb::new(&cfg.l1i, &PageSize::ALL),
            l1d_4k: SetAssocTlb::new(&cfg.l1d_4k, &[PageSize::Size4K]),
            l1d_2m: SetAssocTlb::new(&cfg.l1d_2m, &[PageSize::Size2M]),
            l2: SetAssocTlb::new(&cfg.l2, &PageSize::ALL),
            l1_misses: 0,
            l2_tracker: MpkiTracker::new(cfg.mpki_epoch_instructions),
        }
    }

    /// Replaces the unified L2 array, e.g. for enlarged-L2 configurations.
    pub fn with_l2(mut self, l2: &TlbArrayConfig) -> Self {
        self.l2 = SetAssocTlb::new(l2, &PageSize::ALL);
        self
    }

    fn l1_probe(&mut self, va: VirtAddr, asid: Asid, kind: AccessKind) -> Option<TlbEntry> {
        match kind {
            AccessKind::InstrFetch => self.l1i.probe(va, asid),
            // Both D-TLBs are probed in parallel; at most one can hold the page.
            AccessKind::Load | AccessKind::Store => {
                let small = self.l1d_4k.probe(va, asid);
                let large = self.l1d_2m.probe(va, asid);
                small.or(large)
            }
        }
    }

    fn l1_latency(&self, kind: AccessKind) -> u32 {
        match kind {
            AccessKind::InstrFetch => self.l1i.latency,
            AccessKind::Load | AccessKind::Store => self.l1d_4k.latency.max(self.l1d_2m.latency),
        }
    }

    pub fn lookup(&mut self, va: VirtAddr, asid: Asid, kind: AccessKind) -> TlbLookup {
        let mut cycles = self.l1_latency(kind);
        if let Some(e) = self.l1_probe(va, asid, kind) {
            return TlbLookup {
                hit: TlbHit::L1,
                entry: Some(e),
                cycles,
            };
        }
        self.l1_misses += 1;
        cycles += self.l2.latency;
        match self.l2.probe(va, asid) {
            Some(e) => TlbLookup {
                hit: TlbHit::L2,
                entry: Some(e),
                cycles,
            },
            None => {
                self.l2_tracker.record_miss();
                TlbLookup {
                    hit: TlbHit::Miss,
                    entry: None,
                    cycles,
                }
            }
        }
    }

    /// Inserts into one level and returns the displaced entry. Only L2
    /// evictions are meaningful to the caller.
    pub fn fill(&mut self, level: TlbLevel, kind: AccessKind, entry: TlbEntry) -> Option<TlbEntry> {
        match level {
            TlbLevel::L2 => self.l2.insert(entry),
            TlbLevel::L1 => match (kind, entry.page_size) {
                (AccessKind::InstrFetch, _) => self.l1i.insert(entry),
                (_, PageSize::Size4K) => self.l1d_4k.insert(entry),
                (_, PageSize::Size2M) => self.l1d_2m.insert(entry),
            },
        }
    }

    pub fn invalidate(&mut self, scope: &InvalidationScope) -> usize {
        self.l1i.invalidate(scope)
            + self.l1d_4k.invalidate(scope)
            + self.l1d_2m.invalidate(scope)
            + self.l2.invalidate(scope)
    }

    pub fn valid_count(&self) -> usize {
        self.l1i.valid_count() + self.l1d_4k.valid_count() + self.l1d_2m.valid_count() + self.l2.valid_count()
    }

    pub fn on_retire(&mut self, instructions: u64) {
        self.l2_tracker.on_retire(instructions);
    }

    pub fn l2_mpki(&self) -> f64 {
        self.l2_tracker.mpki()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(vpn: u64, asid: u16) -> TlbEntry {
        TlbEntry {
            vpn,
            pfn: vpn + 100,
            page_size: PageSize::Size4K,
            asid: Asid(asid),
        }
    }

    fn va(vpn: u64) -> VirtAddr {
        VirtAddr(vpn << 12)
    }

    #[test]
    fn l1_hit_costs_one_cycle() {
        let mut h = TlbHierarchy::new(&TlbConfig::default());
        h.fill(TlbLevel::L1, AccessKind::Load, e(9, 0));
        let r = h.lookup(va(9), Asid(0), AccessKind::Load);
        assert_eq!((r.hit, r.cycles), (TlbHit::L1, 1));
    }

    #[test]
    fn l2_hit_costs_thirteen_cycles() {
        let mut h = TlbHierarchy::new(&TlbConfig::default());
        h.fill(TlbLevel::L2, AccessKind::Load, e(9, 0));
        let r = h.lookup(va(9), Asid(0), AccessKind::Load);
        assert_eq!((r.hit, r.cycles), (TlbHit::L2, 13));
    }

    #[test]
    fn cold_miss_costs_both_probes() {
        let mut h = TlbHierarchy::new(&TlbConfig::default());
        let r = h.lookup(va(9), Asid(0), AccessKind::Store);
        assert_eq!((r.hit, r.cycles), (TlbHit::Miss, 13));
        assert_eq!(h.l2_tracker.total_misses, 1);
    }

    #[test]
    fn large_pages_use_their_own_index() {
        let mut h = TlbHierarchy::new(&TlbConfig::default());
        let big = TlbEntry {
            vpn: 3,
            pfn: 512,
            page_size: PageSize::Size2M,
            asid: Asid(0),
        };
        h.fill(TlbLevel::L2, AccessKind::Load, big);
        let r = h.lookup(VirtAddr((3 << 21) + 0x5000), Asid(0), AccessKind::Load);
        assert_eq!(r.hit, TlbHit::L2);
        assert_eq!(r.entry.unwrap().translate(VirtAddr((3 << 21) + 0x5000)), (512 << 12) + 0x5000);
        h.fill(TlbLevel::L1, AccessKind::Load, big);
        assert_eq!(h.l1d_2m.valid_count(), 1);
        assert_eq!(h.l1d_4k.valid_count(), 0);
    }

    #[test]
    fn fill_empty_set_no_eviction_and_refill_in_place() {
        let mut h = TlbHierarchy::new(&TlbConfig::default());
        assert_eq!(h.fill(TlbLevel::L2, AccessKind::Load, e(1, 0)), None);
        let mut moved = e(1, 0);
        moved.pfn = 5;
        assert_eq!(h.fill(TlbLevel::L2, AccessKind::Load, moved), None);
        assert_eq!(h.l2.valid_count(), 1);
        assert_eq!(h.lookup(va(1), Asid(0), AccessKind::Load).entry.unwrap().pfn, 5);
    }

    #[test]
    fn full_l2_set_evicts_lru() {
        let mut h = TlbHierarchy::new(&TlbConfig::default());
        let sets = h.l2.sets() as u64;
        // Twelve entries in set 0, then touch all but vpn 3 * sets.
        for i in 0..12 {
            assert_eq!(h.fill(TlbLevel::L2, AccessKind::Load, e(i * sets, 0)), None);
        }
        for i in (0..12).filter(|&i| i != 3) {
            h.l2.probe(va(i * sets), Asid(0)).unwrap();
        }
        let evicted = h.fill(TlbLevel::L2, AccessKind::Load, e(12 * sets, 0));
        assert_eq!(evicted, Some(e(3 * sets, 0)));
    }

    #[test]
    fn lru_matches_reference_list() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tlb = SetAssocTlb::new(&TlbArrayConfig::new(4, 4, 1), &[PageSize::Size4K]);
        // Reference: most recent at the back.
        let mut order: Vec<u64> = Vec::new();
        for _ in 0..5000 {
            let vpn = rng.random_range(0..8u64);
            if rng.random_bool(0.5) {
                let hit = tlb.probe(va(vpn), Asid(0)).is_some();
                assert_eq!(hit, order.contains(&vpn));
                if hit {
                    order.retain(|&v| v != vpn);
                    order.push(vpn);
                }
            } else {
                let evicted = tlb.insert(e(vpn, 0)).map(|x| x.vpn);
                let expected = if order.contains(&vpn) {
                    order.retain(|&v| v != vpn);
                    None
                } else if order.len() == 4 {
                    Some(order.remove(0))
                } else {
                    None
                };
                order.push(vpn);
                assert_eq!(evicted, expected);
            }
        }
    }

    #[test]
    fn invalidation_scopes() {
        let mut h = TlbHierarchy::new(&TlbConfig::default());
        for i in 0..7 {
            h.fill(TlbLevel::L2, AccessKind::Load, e(i, (i % 3) as u16));
        }
        assert_eq!(h.invalidate(&InvalidationScope::ByVa { vpn: 1000, asid: Asid(0) }), 0);
        let asid1: Vec<_> = h.l2.entries().filter(|x| x.asid == Asid(1)).copied().collect();
        assert_eq!(h.invalidate(&InvalidationScope::ByAsid(Asid(1))), asid1.len());
        assert!(h.l2.entries().all(|x| x.asid != Asid(1)));
        assert_eq!(h.invalidate(&InvalidationScope::All), 7 - asid1.len());
        assert_eq!(h.valid_count(), 0);
    }

    #[test]
    fn range_invalidation_hits_large_pages() {
        let mut tlb = SetAssocTlb::new(&TlbArrayConfig::new(16, 4, 1), &PageSize::ALL);
        tlb.insert(TlbEntry {
            vpn: 1,
            pfn: 512,
            page_size: PageSize::Size2M,
            asid: Asid(0),
        });
        tlb.insert(e(5, 0));
        let n = tlb.invalidate(&InvalidationScope::ByRange {
            lo: 600,
            hi: 601,
            asid: Asid(0),
        });
        assert_eq!(n, 1);
        assert_eq!(tlb.valid_count(), 1);
    }

    #[test]
    fn mpki_epochs() {
        let mut t = MpkiTracker::new(100_000);
        for _ in 0..100 {
            t.record_miss();
        }
        t.on_retire(100_000);
        assert_eq!(t.mpki(), 1.0);
        for _ in 0..600 {
            t.record_miss();
        }
        t.on_retire(50_000);
        assert_eq!(t.mpki(), 1.0);
        t.on_retire(0);
        assert_eq!(t.mpki(), 1.0);
        t.on_retire(50_000);
        assert_eq!(t.mpki(), 6.0);
        assert!(t.mpki() > 5.0);
    }

    proptest::proptest! {
        #[test]
        fn no_duplicates_and_lookup_after_fill(ops in proptest::collection::vec((0u64..64, 0u16..3, proptest::bool::ANY), 1..300)) {
            let mut h = TlbHierarchy::new(&TlbConfig::default());
            for (vpn, asid, l1) in ops {
                let level = if l1 { TlbLevel::L1 } else { TlbLevel::L2 };
                h.fill(level, AccessKind::Load, e(vpn, asid));
                let r = h.lookup(va(vpn), Asid(asid), AccessKind::Load);
                let expect = if l1 { TlbHit::L1 } else { TlbHit::L2 };
                // An L2 fill may still be shadowed by an older L1 copy.
                proptest::prop_assert!(r.hit == expect || r.hit == TlbHit::L1);
                for arr in [&h.l1d_4k, &h.l2] {
                    let mut keys: Vec<_> = arr.entries().map(|x| (x.vpn, x.page_size, x.asid)).collect();
                    let n = keys.len();
                    keys.sort();
                    keys.dedup();
                    proptest::prop_assert_eq!(keys.len(), n);
                }
            }
        }
    }
}
