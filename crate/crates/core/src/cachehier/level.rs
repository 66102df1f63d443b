use serde::{Deserialize, Serialize};

use crate::addrspace::{tlb_block_coords, Asid, PageSize};
use crate::error::{Error, Result};

/// Largest re-reference prediction value (2-bit RRPV).
pub const RRIP_MAX: u8 = 3;
/// L2 TLB MPKI above which TLB blocks get preferential treatment.
pub const TLB_PRESSURE_MPKI: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum BlockKind {
    #[default]
    Data,
    TlbBlock,
    NestedTlbBlock,
}

impl BlockKind {
    pub fn is_tlb(self) -> bool {
        self != BlockKind::Data
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplacementPolicy {
    Lru,
    Srrip,
    TlbAwareSrrip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMeta {
    pub valid: bool,
    pub dirty: bool,
    pub kind: BlockKind,
    pub tag: u64,
    pub asid: Asid,
    pub page_size: PageSize,
    pub rrpv: u8,
    lru: u64,
    /// Hits since fill, for reuse accounting.
    pub hits: u32,
}

impl Default for BlockMeta {
    fn default() -> Self {
        Self {
            valid: false,
            dirty: false,
            kind: BlockKind::Data,
            tag: 0,
            asid: Asid(0),
            page_size: PageSize::Size4K,
            rrpv: RRIP_MAX,
            lru: 0,
            hits: 0,
        }
    }
}

/// Eight leaf PTEs (frame numbers) for eight consecutive VPNs; slot `i`
/// belongs to `vpn_base + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TlbBlockPayload {
    pub pfns: [Option<u64>; 8],
}

/// Reuse of evicted blocks, bucketed as {0, 1, 2-20, >20} hits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReuseHistogram {
    pub buckets: [u64; 4],
}

impl ReuseHistogram {
    pub const LABELS: [&'static str; 4] = ["0", "1", "2-20", ">20"];

    pub fn record(&mut self, hits: u32) {
        let b = match hits {
            0 => 0,
            1 => 1,
            2..=20 => 2,
            _ => 3,
        };
        self.buckets[b] += 1;
    }

    pub fn total(&self) -> u64 {
        self.buckets.iter().sum()
    }

    pub fn fraction(&self, bucket: usize) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.buckets[bucket] as f64 / t as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LevelStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub writebacks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheLevelConfig {
    pub size_bytes: u64,
    pub ways: usize,
    pub latency: u32,
    pub policy: ReplacementPolicy,
}

impl CacheLevelConfig {
    pub fn num_sets(&self, line_bytes: u64) -> u64 {
        self.size_bytes / line_bytes / self.ways as u64
    }

    pub fn validate(&self, name: &str, line_bytes: u64) -> Result<()> {
        let sets = self.num_sets(line_bytes);
        if self.ways == 0 || sets == 0 || !sets.is_power_of_two() || sets * line_bytes * self.ways as u64 != self.size_bytes {
            return Err(Error::config(format!(
                "{name}: {} bytes / {} ways does not give a power-of-two set count",
                self.size_bytes, self.ways
            )));
        }
        Ok(())
    }
}

/// A block displaced by replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evicted {
    pub kind: BlockKind,
    pub dirty: bool,
    /// Line address for data blocks.
    pub line_addr: u64,
}

/// One set-associative cache level whose blocks may hold data or TLB entries.
#[derive(Debug, Clone)]
pub struct CacheLevel {
    sets: usize,
    ways: usize,
    set_bits: u32,
    line_bits: u32,
    pub latency: u32,
    pub policy: ReplacementPolicy,
    blocks: Vec<BlockMeta>,
    payloads: Vec<TlbBlockPayload>,
    clock: u64,
    pub stats: LevelStats,
    pub data_reuse: ReuseHistogram,
    pub tlb_reuse: ReuseHistogram,
    /// Valid blocks per [kind][page size].
    resident: [[u64; 2]; 3],
}

fn size_index(size: PageSize) -> usize {
    match size {
        PageSize::Size4K => 0,
        PageSize::Size2M => 1,
    }
}

impl CacheLevel {
    pub fn new(cfg: &CacheLevelConfig, line_bytes: u64) -> Self {
        let sets = cfg.num_sets(line_bytes) as usize;
        Self {
            sets,
            ways: cfg.ways,
            set_bits: sets.trailing_zeros(),
            line_bits: line_bytes.trailing_zeros(),
            latency: cfg.latency,
            policy: cfg.policy,
            blocks: vec![BlockMeta::default(); sets * cfg.ways],
            payloads: Vec::new(),
            clock: 0,
            stats: LevelStats::default(),
            data_reuse: ReuseHistogram::default(),
            tlb_reuse: ReuseHistogram::default(),
            resident: [[0; 2]; 3],
        }
    }

    pub fn num_sets(&self) -> usize {
        self.sets
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn set_blocks(&self, set: usize) -> &[BlockMeta] {
        &self.blocks[set * self.ways..(set + 1) * self.ways]
    }

    pub fn set_blocks_mut(&mut self, set: usize) -> &mut [BlockMeta] {
        &mut self.blocks[set * self.ways..(set + 1) * self.ways]
    }

    pub fn blocks(&self) -> &[BlockMeta] {
        &self.blocks
    }

    /// Count of valid blocks of `kind` holding `size` translations.
    pub fn resident(&self, kind: BlockKind, size: PageSize) -> u64 {
        self.resident[kind.index()][size_index(size)]
    }

    fn data_coords(&self, pa: u64) -> (usize, u64) {
        let line = pa >> self.line_bits;
        ((line & (self.sets as u64 - 1)) as usize, line >> self.set_bits)
    }

    fn idx(&self, set: usize, way: usize) -> usize {
        set * self.ways + way
    }

    fn find(&self, set: usize, pred: impl Fn(&BlockMeta) -> bool) -> Option<usize> {
        self.set_blocks(set).iter().position(|b| b.valid && pred(b))
    }

    /// Looks up a physical line; on a hit updates replacement state.
    pub fn access(&mut self, pa: u64, write: bool, tlb_mpki: f64) -> bool {
        let (set, tag) = self.data_coords(pa);
        match self.find(set, |b| b.kind == BlockKind::Data && b.tag == tag) {
            Some(way) => {
                self.stats.hits += 1;
                self.touch(set, way, tlb_mpki);
                if write {
                    let i = self.idx(set, way);
                    self.blocks[i].dirty = true;
                }
                true
            }
            None => {
                self.stats.misses += 1;
                false
            }
        }
    }

    /// Residency check without side effects.
    pub fn contains(&self, pa: u64) -> bool {
        let (set, tag) = self.data_coords(pa);
        self.find(set, |b| b.kind == BlockKind::Data && b.tag == tag).is_some()
    }

    /// Marks a resident line dirty; returns false if absent.
    pub fn mark_dirty(&mut self, pa: u64) -> bool {
        let (set, tag) = self.data_coords(pa);
        match self.find(set, |b| b.kind == BlockKind::Data && b.tag == tag) {
            Some(way) => {
                let i = self.idx(set, way);
                self.blocks[i].dirty = true;
                true
            }
            None => false,
        }
    }

    fn touch(&mut self, set: usize, way: usize, tlb_mpki: f64) {
        self.clock += 1;
        let i = self.idx(set, way);
        let policy = self.policy;
        let b = &mut self.blocks[i];
        b.hits = b.hits.saturating_add(1);
        b.lru = self.clock;
        match policy {
            ReplacementPolicy::Lru => {}
            ReplacementPolicy::Srrip => b.rrpv = b.rrpv.saturating_sub(1),
            ReplacementPolicy::TlbAwareSrrip => srrip_on_hit(b, tlb_mpki),
        }
    }

    fn insertion_rrpv(&self, kind: BlockKind, tlb_mpki: f64) -> u8 {
        match self.policy {
            ReplacementPolicy::TlbAwareSrrip => srrip_insert_rrpv(kind, tlb_mpki),
            _ => RRIP_MAX - 1,
        }
    }

    /// Replacement victim for `set`. Ages the set as a side effect under
    /// SRRIP variants.
    pub fn choose_victim(&mut self, set: usize, tlb_mpki: f64) -> usize {
        let policy = self.policy;
        let blocks = self.set_blocks_mut(set);
        if let Some(free) = blocks.iter().position(|b| !b.valid) {
            return free;
        }
        match policy {
            ReplacementPolicy::Lru => blocks
                .iter()
                .enumerate()
                .min_by_key(|(_, b)| b.lru)
                .map(|(i, _)| i)
                .expect("non-empty set"),
            ReplacementPolicy::Srrip => srrip_victim(blocks, false, tlb_mpki),
            ReplacementPolicy::TlbAwareSrrip => srrip_victim(blocks, true, tlb_mpki),
        }
    }

    /// Drops the block at (`set`, `way`), recording reuse if it was valid.
    fn evict(&mut self, set: usize, way: usize) -> Option<Evicted> {
        let i = self.idx(set, way);
        let b = self.blocks[i];
        if !b.valid {
            return None;
        }
        self.stats.evictions += 1;
        if b.kind.is_tlb() {
            self.tlb_reuse.record(b.hits);
        } else {
            self.data_reuse.record(b.hits);
        }
        self.remove(i);
        Some(Evicted {
            kind: b.kind,
            dirty: b.dirty,
            line_addr: ((b.tag << self.set_bits) | set as u64) << self.line_bits,
        })
    }

    fn remove(&mut self, i: usize) {
        let b = &mut self.blocks[i];
        if b.valid {
            self.resident[b.kind.index()][size_index(b.page_size)] -= 1;
        }
        *b = BlockMeta::default();
    }

    fn install(&mut self, set: usize, way: usize, meta: BlockMeta) {
        self.clock += 1;
        let i = self.idx(set, way);
        self.resident[meta.kind.index()][size_index(meta.page_size)] += 1;
        self.blocks[i] = BlockMeta { lru: self.clock, ..meta };
    }

    /// Inserts a physical line; returns whatever it displaced.
    pub fn fill(&mut self, pa: u64, dirty: bool, tlb_mpki: f64) -> Option<Evicted> {
        let (set, tag) = self.data_coords(pa);
        if self.find(set, |b| b.kind == BlockKind::Data && b.tag == tag).is_some() {
            return None;
        }
        let way = self.choose_victim(set, tlb_mpki);
        let evicted = self.evict(set, way);
        let rrpv = self.insertion_rrpv(BlockKind::Data, tlb_mpki);
        self.install(
            set,
            way,
            BlockMeta {
                valid: true,
                dirty,
                kind: BlockKind::Data,
                tag,
                rrpv,
                ..BlockMeta::default()
            },
        );
        evicted
    }

    /// Removes a physical line without counting it as an eviction.
    pub fn invalidate_line(&mut self, pa: u64) -> Option<BlockMeta> {
        let (set, tag) = self.data_coords(pa);
        let way = self.find(set, |b| b.kind == BlockKind::Data && b.tag == tag)?;
        let i = self.idx(set, way);
        let b = self.blocks[i];
        self.remove(i);
        Some(b)
    }

    fn tlb_match(&self, kind: BlockKind, vpn: u64, size: PageSize, asid: Asid) -> (usize, Option<usize>) {
        let c = tlb_block_coords(vpn, self.sets as u64);
        let way = self.find(c.set_index, |b| {
            b.kind == kind && b.tag == c.block_tag && b.asid == asid && b.page_size == size
        });
        (c.set_index, way)
    }

    pub fn has_tlb_block(&self, kind: BlockKind, vpn: u64, size: PageSize, asid: Asid) -> bool {
        self.tlb_match(kind, vpn, size, asid).1.is_some()
    }

    /// Looks up the TLB block holding `vpn` (in `size` units). On a hit,
    /// applies the hit update and returns the block's payload.
    pub fn probe_tlb(
        &mut self,
        kind: BlockKind,
        vpn: u64,
        size: PageSize,
        asid: Asid,
        tlb_mpki: f64,
    ) -> Option<TlbBlockPayload> {
        let (set, way) = self.tlb_match(kind, vpn, size, asid);
        let way = way?;
        self.touch(set, way, tlb_mpki);
        Some(self.payloads[self.idx(set, way)])
    }

    /// Overwrites the payload of a resident block without touching its
    /// replacement state.
    pub fn refresh_tlb(&mut self, kind: BlockKind, vpn: u64, size: PageSize, asid: Asid, payload: TlbBlockPayload) -> bool {
        let (set, way) = self.tlb_match(kind, vpn, size, asid);
        match way {
            Some(way) => {
                let i = self.idx(set, way);
                self.payloads[i] = payload;
                true
            }
            None => false,
        }
    }

    /// Installs a TLB block for the group starting at `vpn_base` in the set
    /// its VPN selects. Returns the displaced block, if any.
    pub fn insert_tlb(
        &mut self,
        kind: BlockKind,
        vpn_base: u64,
        size: PageSize,
        asid: Asid,
        payload: TlbBlockPayload,
        tlb_mpki: f64,
    ) -> Option<Evicted> {
        debug_assert!(kind.is_tlb() && vpn_base.is_multiple_of(8));
        if self.payloads.is_empty() {
            self.payloads = vec![TlbBlockPayload::default(); self.blocks.len()];
        }
        let c = tlb_block_coords(vpn_base, self.sets as u64);
        let way = self.choose_victim(c.set_index, tlb_mpki);
        let evicted = self.evict(c.set_index, way);
        let rrpv = self.insertion_rrpv(kind, tlb_mpki);
        self.install(
            c.set_index,
            way,
            BlockMeta {
                valid: true,
                dirty: false,
                kind,
                tag: c.block_tag,
                asid,
                page_size: size,
                rrpv,
                ..BlockMeta::default()
            },
        );
        let i = self.idx(c.set_index, way);
        self.payloads[i] = payload;
        evicted
    }

    /// Invalidates every TLB-kind block accepted by `pred`.
    pub fn invalidate_tlb_where(&mut self, pred: impl Fn(&BlockMeta) -> bool) -> usize {
        let mut n = 0;
        for i in 0..self.blocks.len() {
            let b = self.blocks[i];
            if b.valid && b.kind.is_tlb() && pred(&b) {
                self.remove(i);
                n += 1;
            }
        }
        n
    }

    /// Invalidates the one block of `kind` covering `vpn` (in `size` units).
    pub fn invalidate_tlb_block(&mut self, kind: BlockKind, vpn: u64, size: PageSize, asid: Asid) -> bool {
        let (set, way) = self.tlb_match(kind, vpn, size, asid);
        match way {
            Some(way) => {
                let i = self.idx(set, way);
                self.remove(i);
                true
            }
            None => false,
        }
    }
}

/// Insertion RRPV under TLB-aware SRRIP.
pub fn srrip_insert_rrpv(kind: BlockKind, tlb_mpki: f64) -> u8 {
    if kind.is_tlb() && tlb_mpki > TLB_PRESSURE_MPKI {
        0
    } else {
        RRIP_MAX - 1
    }
}

/// Hit update under TLB-aware SRRIP: TLB blocks under pressure step three
/// intervals closer, everything else one.
pub fn srrip_on_hit(block: &mut BlockMeta, tlb_mpki: f64) {
    let step = if block.kind.is_tlb() && tlb_mpki > TLB_PRESSURE_MPKI { 3 } else { 1 };
    block.rrpv = block.rrpv.saturating_sub(step);
}

/// SRRIP victim search over a full set. With `tlb_aware`, a TLB-block victim
/// under pressure gets one more attempt to find a non-TLB block at the same
/// RRPV; if none exists the TLB block goes.
pub fn srrip_victim(blocks: &mut [BlockMeta], tlb_aware: bool, tlb_mpki: f64) -> usize {
    for _ in 0..=RRIP_MAX {
        if let Some(way) = blocks.iter().position(|b| b.rrpv >= RRIP_MAX) {
            if tlb_aware && blocks[way].kind.is_tlb() && tlb_mpki > TLB_PRESSURE_MPKI {
                if let Some(alt) = blocks.iter().position(|b| b.rrpv >= RRIP_MAX && !b.kind.is_tlb()) {
                    return alt;
                }
            }
            return way;
        }
        for b in blocks.iter_mut() {
            b.rrpv = (b.rrpv + 1).min(RRIP_MAX);
        }
    }
    unreachable!("aging reaches RRIP_MAX within RRIP_MAX rounds")
}
