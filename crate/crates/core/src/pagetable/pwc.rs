use serde::{Deserialize, Serialize};

use crate::addrspace::{BASE_PAGE_SHIFT, BITS_PER_LEVEL, RADIX_LEVELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PwcConfig {
    pub enabled: bool,
    pub entries: usize,
    pub ways: usize,
    pub latency: u32,
}

impl Default for PwcConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            entries: 32,
            ways: 4,
            latency: 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PwcEntry {
    prefix: u64,
    node: u32,
    stamp: u64,
}

/// One split page-walk cache: maps a VA prefix to the page-table node that
/// the entry at that prefix points to.
#[derive(Debug, Clone)]
struct PwcArray {
    sets: usize,
    ways: usize,
    entries: Vec<Option<PwcEntry>>,
}

impl PwcArray {
    fn new(entries: usize, ways: usize) -> Self {
        let sets = (entries / ways).max(1);
        Self {
            sets,
            ways,
            entries: vec![None; sets * ways],
        }
    }

    fn set(&mut self, prefix: u64) -> &mut [Option<PwcEntry>] {
        let s = (prefix as usize) % self.sets;
        &mut self.entries[s * self.ways..(s + 1) * self.ways]
    }

    fn lookup(&mut self, prefix: u64, now: u64) -> Option<u32> {
        self.set(prefix).iter_mut().flatten().find(|e| e.prefix == prefix).map(|e| {
            e.stamp = now;
            e.node
        })
    }

    fn fill(&mut self, prefix: u64, node: u32, now: u64) {
        let set = self.set(prefix);
        if let Some(e) = set.iter_mut().flatten().find(|e| e.prefix == prefix) {
            e.node = node;
            e.stamp = now;
            return;
        }
        let way = set.iter().position(Option::is_none).unwrap_or_else(|| {
            set.iter()
                .enumerate()
                .min_by_key(|(_, e)| e.map_or(0, |e| e.stamp))
                .map(|(i, _)| i)
                .unwrap_or(0)
        });
        set[way] = Some(PwcEntry { prefix, node, stamp: now });
    }

    fn clear(&mut self) {
        self.entries.iter_mut().for_each(|e| *e = None);
    }
}

/// The three split page-walk caches, one per non-leaf level, LRU replaced.
#[derive(Debug, Clone)]
pub struct PageWalkCaches {
    levels: [PwcArray; RADIX_LEVELS - 1],
    pub latency: u32,
    clock: u64,
    pub hits: u64,
    pub misses: u64,
}

impl PageWalkCaches {
    pub fn new(cfg: &PwcConfig) -> Self {
        Self {
            levels: std::array::from_fn(|_| PwcArray::new(cfg.entries, cfg.ways)),
            latency: cfg.latency,
            clock: 0,
            hits: 0,
            misses: 0,
        }
    }

    /// VA prefix identifying the entry read at `level` (0 = root).
    pub fn prefix(va: u64, level: usize) -> u64 {
        va >> (BASE_PAGE_SHIFT + BITS_PER_LEVEL * (RADIX_LEVELS - 1 - level) as u32)
    }

    pub fn lookup(&mut self, va: u64, level: usize) -> Option<u32> {
        self.clock += 1;
        let hit = self.levels[level].lookup(Self::prefix(va, level), self.clock);
        if hit.is_some() {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        hit
    }

    pub fn fill(&mut self, va: u64, level: usize, node: u32) {
        self.clock += 1;
        self.levels[level].fill(Self::prefix(va, level), node, self.clock);
    }

    pub fn flush(&mut self) {
        self.levels.iter_mut().for_each(PwcArray::clear);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lru_within_set() {
        let mut pwc = PageWalkCaches::new(&PwcConfig {
            enabled: true,
            entries: 4,
            ways: 4,
            latency: 2,
        });
        // Five distinct PD-level prefixes into a single 4-way set.
        let va = |i: u64| i << 21;
        for i in 0..4 {
            pwc.fill(va(i), 2, i as u32);
        }
        assert_eq!(pwc.lookup(va(0), 2), Some(0));
        pwc.fill(va(4), 2, 4);
        assert_eq!(pwc.lookup(va(1), 2), None);
        assert_eq!(pwc.lookup(va(0), 2), Some(0));
        assert_eq!(pwc.lookup(va(4), 2), Some(4));
    }

    #[test]
    fn levels_are_split() {
        let mut pwc = PageWalkCaches::new(&PwcConfig::default());
        pwc.fill(0, 0, 7);
        assert_eq!(pwc.lookup(0, 0), Some(7));
        assert_eq!(pwc.lookup(0, 1), None);
        pwc.flush();
        assert_eq!(pwc.lookup(0, 0), None);
    }
}
