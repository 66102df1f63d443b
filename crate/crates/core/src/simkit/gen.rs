//! Deterministic synthetic trace generators.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pagetable::splitmix64;
use crate::tlbhier::AccessKind;

use super::trace::TraceRecord;

const PAGE: u64 = 4096;
const LINE: u64 = 64;
/// Pointer chasing keeps one u32 successor per page in memory.
const MAX_CHASE_PAGES: u64 = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Uniformly random lines over the footprint, GUPS style.
    #[serde(alias = "uniform")]
    UniformRandom,
    /// `base + i * stride` wrapped at the footprint.
    Strided,
    /// Pages drawn with a power-law rank distribution.
    #[serde(alias = "zipf")]
    Zipfian,
    /// Follows one random cycle through every page.
    #[serde(alias = "chase")]
    PointerChase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub footprint_bytes: u64,
    pub record_count: u64,
    pub seed: u64,
    /// Not part of the emitted trace; a run that generates its trace inline
    /// uses it as the backend's large-page fraction.
    pub large_page_fraction: f64,
    pub stride: u64,
    pub zipf_exponent: f64,
    pub base_va: u64,
    pub instructions_per_access: u32,
    pub store_fraction: f64,
    pub asid: u8,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::UniformRandom,
            footprint_bytes: 1 << 30,
            record_count: 1_000_000,
            seed: 1,
            large_page_fraction: 0.0,
            stride: PAGE,
            zipf_exponent: 1.0,
            base_va: 0,
            instructions_per_access: 4,
            store_fraction: 0.0,
            asid: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.footprint_bytes == 0 {
            return Err(Error::config("generator footprint must be non-zero"));
        }
        if self.footprint_bytes < LINE {
            return Err(Error::config("generator footprint is smaller than a cache line"));
        }
        if !(0.0..=1.0).contains(&self.large_page_fraction) {
            return Err(Error::config("large_page_fraction must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.store_fraction) {
            return Err(Error::config("store_fraction must lie in [0, 1]"));
        }
        match self.kind {
            GeneratorKind::Strided if self.stride == 0 => Err(Error::config("stride must be non-zero")),
            GeneratorKind::Zipfian if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) => {
                Err(Error::config("zipf_exponent must be positive"))
            }
            GeneratorKind::PointerChase if self.pages() > MAX_CHASE_PAGES => Err(Error::config(format!(
                "pointer-chase footprint exceeds {} pages",
                MAX_CHASE_PAGES
            ))),
            _ => Ok(()),
        }
    }

    fn pages(&self) -> u64 {
        self.footprint_bytes.div_ceil(PAGE)
    }
}

enum Pattern {
    Uniform { lines: u64 },
    Strided { stride: u64, pos: u64 },
    Zipf { dist: Zipf<f64>, pages: u64, step: u64 },
    Chase { next: Vec<u32>, cur: u32 },
}

/// Iterator over the records a [`GeneratorSpec`] describes.
pub struct Generator {
    spec: GeneratorSpec,
    rng: ChaCha8Rng,
    pattern: Pattern,
    emitted: u64,
}

impl Generator {
    pub fn new(spec: GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let pattern = match spec.kind {
            GeneratorKind::UniformRandom => Pattern::Uniform {
                lines: spec.footprint_bytes / LINE,
            },
            GeneratorKind::Strided => Pattern::Strided {
                stride: spec.stride,
                pos: 0,
            },
            GeneratorKind::Zipfian => {
                let pages = spec.pages();
                let dist = Zipf::new(pages as f64, spec.zipf_exponent)
                    .map_err(|e| Error::config(format!("zipf parameters: {e}")))?;
                Pattern::Zipf {
                    dist,
                    pages,
                    step: coprime_step(pages),
                }
            }
            GeneratorKind::PointerChase => {
                let pages = spec.pages() as usize;
                Pattern::Chase {
                    next: sattolo_cycle(pages, &mut rng),
                    cur: 0,
                }
            }
        };
        Ok(Self {
            spec,
            rng,
            pattern,
            emitted: 0,
        })
    }

    fn next_offset(&mut self) -> u64 {
        match &mut self.pattern {
            Pattern::Uniform { lines } => self.rng.random_range(0..*lines) * LINE,
            Pattern::Strided { stride, pos } => {
                let off = *pos;
                *pos = (*pos + *stride) % self.spec.footprint_bytes;
                off
            }
            Pattern::Zipf { dist, pages, step } => {
                let rank = dist.sample(&mut self.rng) as u64 - 1;
                // Scatter hot ranks across the footprint.
                let page = (rank as u128 * *step as u128 % *pages as u128) as u64;
                let line = self.rng.random_range(0..PAGE / LINE);
                (page * PAGE + line * LINE).min(self.spec.footprint_bytes - LINE)
            }
            Pattern::Chase { next, cur } => {
                *cur = next[*cur as usize];
                let page = *cur as u64;
                let line = splitmix64(page ^ self.spec.seed) % (PAGE / LINE);
                (page * PAGE + line * LINE).min(self.spec.footprint_bytes - LINE)
            }
        }
    }
}

impl Iterator for Generator {
    type Item = TraceRecord;

    fn next(&mut self) -> Option<TraceRecord> {
        if self.emitted == self.spec.record_count {
            return None;
        }
        self.emitted += 1;
        let va = self.spec.base_va + self.next_offset();
        let kind = if self.spec.store_fraction > 0.0 && self.rng.random_bool(self.spec.store_fraction) {
            AccessKind::Store
        } else {
            AccessKind::Load
        };
        Some(TraceRecord::access(kind, va, self.spec.asid, self.spec.instructions_per_access))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.spec.record_count - self.emitted) as usize;
        (left, Some(left))
    }
}

/// A single cycle through `0..n` (Sattolo's shuffle).
fn sattolo_cycle(n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(rng);
    let mut next = vec![0u32; n];
    for i in 0..n {
        next[order[i] as usize] = order[(i + 1) % n];
    }
    next
}

/// A multiplier near n/phi that is coprime with n, so `rank * step mod n`
/// is a bijection.
fn coprime_step(n: u64) -> u64 {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    if n <= 2 {
        return 1;
    }
    let mut k = ((n as f64) * 0.618_033_988_75) as u64 | 1;
    while gcd(k, n) != 1 {
        k += 2;
    }
    k
}
