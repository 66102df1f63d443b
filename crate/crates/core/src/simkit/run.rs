//! Trace-driven simulation loop and the parallel batch runner.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::mmu::Mmu;

use super::gen::{Generator, GeneratorSpec};
use super::stats::Stats;
use super::trace::{open_trace, Op, TraceRecord};

pub type RecordStream = Box<dyn Iterator<Item = Result<TraceRecord>>>;

/// A trace a job reads when it starts.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceInput {
    File(PathBuf),
    Generator(GeneratorSpec),
}

impl TraceInput {
    pub fn open(&self) -> Result<RecordStream> {
        match self {
            TraceInput::File(p) => open_trace(std::fs::File::open(p)?),
            TraceInput::Generator(g) => Ok(Box::new(Generator::new(*g)?.map(Ok))),
        }
    }

    /// The input named by a configuration's trace section.
    pub fn from_config(cfg: &SimConfig) -> Result<Self> {
        match (&cfg.trace.path, &cfg.trace.generator) {
            (Some(p), None) => Ok(TraceInput::File(p.clone())),
            (None, Some(g)) => Ok(TraceInput::Generator(*g)),
            (None, None) => Err(Error::config("no trace: set trace.path or trace.generator")),
            (Some(_), Some(_)) => Err(Error::config("trace.path and trace.generator are mutually exclusive")),
        }
    }
}

/// Simulates `records` under `cfg`. An empty trace yields zeroed stats.
pub fn run(cfg: &SimConfig, records: impl IntoIterator<Item = Result<TraceRecord>>) -> Result<Stats> {
    cfg.validate()?;
    let mut mmu = Mmu::new(&cfg.machine, &cfg.tlb, &cfg.cache, &cfg.predictor, &cfg.backend, cfg.seed)?;
    let mut s = Stats::empty(cfg.backend.kind);
    let period = cfg.stats.sample_instructions;
    let mut next_sample = period;
    let mut occupancy = Vec::new();
    let mut reach = Vec::new();
    let mut walk_cycles = 0u64;

    for (index, rec) in records.into_iter().enumerate() {
        let rec = rec?;
        s.records += 1;
        let delta = rec.icount_delta as u64;
        mmu.on_retire(delta);
        s.instructions += delta;
        while s.instructions >= next_sample {
            occupancy.push(mmu.caches.tlb_block_count());
            reach.push(mmu.caches.translation_reach());
            next_sample += period;
        }
        match rec.op {
            Op::Access(kind) => {
                let t = mmu.translate(rec.va, rec.asid, kind).map_err(|e| Error::Parse {
                    index: index as u64,
                    reason: e.to_string(),
                })?;
                if let Some(w) = t.walk_cycles {
                    s.ptw_latency_histogram.record(w);
                    walk_cycles += w;
                }
                let d = mmu.caches.access_data(t.pa, kind);
                s.memory_accesses += 1;
                s.translation_cycles += t.cycles;
                s.data_cycles += d.cycles as u64;
                mmu.advance_clock(t.cycles + d.cycles as u64);
            }
            Op::Maintenance(cmd) => {
                let c = mmu.maintenance(&cmd);
                mmu.advance_clock(c);
            }
            Op::AsidSwitch(_) => s.asid_switches += 1,
        }
    }

    let c = mmu.counters;
    let kilo = |n: u64| {
        if s.instructions == 0 {
            0.0
        } else {
            n as f64 * 1000.0 / s.instructions as f64
        }
    };
    let mean = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    s.l1_tlb_misses = mmu.tlbs.l1_misses;
    s.l1_tlb_mpki = kilo(s.l1_tlb_misses);
    s.l2_tlb_misses = c.l2_tlb_misses;
    s.l2_tlb_mpki = kilo(c.l2_tlb_misses);
    s.ptw_count = c.ptw_count;
    s.guest_ptw_count = c.guest_ptw_count;
    s.host_ptw_count = c.host_ptw_count;
    s.l2_cache_tlb_hit_count = c.l2_cache_tlb_hits;
    s.avg_l2_tlb_miss_latency = mean(c.l2_tlb_miss_cycles, c.l2_tlb_misses);
    s.avg_ptw_latency = mean(walk_cycles, s.ptw_latency_histogram.total());
    s.maintenance_cycles = c.maintenance_cycles;
    s.total_cycles = s.translation_cycles + s.data_cycles + s.maintenance_cycles;
    s.l1d_cache = mmu.caches.l1d.stats;
    s.l2_cache = mmu.caches.l2.stats;
    s.l3_cache = mmu.caches.l3.stats;
    s.l2_cache_mpki = kilo(s.l2_cache.misses);
    s.dram_accesses = mmu.caches.dram_accesses;
    s.final_tlb_blocks = mmu.caches.tlb_block_count();
    s.mean_translation_reach = mean(reach.iter().sum(), reach.len() as u64);
    let stride = reach.len().div_ceil(cfg.stats.timeline_points).max(1);
    if !reach.is_empty() {
        s.timeline_stride_instructions = period * stride as u64;
    }
    s.occupancy_timeline = occupancy.into_iter().skip(stride - 1).step_by(stride).collect();
    s.reach_timeline = reach.into_iter().skip(stride - 1).step_by(stride).collect();
    s.data_reuse_histogram = mmu.caches.l2.data_reuse;
    s.tlb_reuse_histogram = mmu.caches.l2.tlb_reuse;
    s.mmu = c;
    Ok(s)
}

/// Runs a configuration against the trace its own trace section names.
pub fn run_config(cfg: &SimConfig) -> Result<Stats> {
    let input = TraceInput::from_config(cfg)?;
    run(&cfg.effective(), input.open()?)
}

/// Runs every `(config, input)` job on up to `threads` workers. Results
/// come back in job order and do not depend on the thread count.
pub fn run_batch(jobs: &[(SimConfig, TraceInput)], threads: usize) -> Vec<Result<Stats>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Stats>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let workers = threads.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((cfg, input)) = jobs.get(i) else { break };
                let r = input.open().and_then(|recs| run(cfg, recs));
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every job ran"))
        .collect()
}
