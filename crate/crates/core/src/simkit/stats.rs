//! Run statistics and their JSON, CSV and gnuplot renderings.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cachehier::{LevelStats, ReuseHistogram};
use crate::mmu::{Backend, MmuCounters};

/// Lower bucket edges, in cycles, of the walk-latency histogram.
pub const PTW_LATENCY_EDGES: [u64; 12] = [0, 20, 30, 40, 60, 80, 120, 160, 240, 320, 480, 640];

/// Counts per bucket; bucket `i` covers `[edges[i], edges[i + 1])` and the
/// last is open-ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<u64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(edges: &[u64]) -> Self {
        debug_assert!(edges.windows(2).all(|w| w[0] < w[1]));
        Self {
            edges: edges.to_vec(),
            counts: vec![0; edges.len()],
        }
    }

    pub fn record(&mut self, v: u64) {
        let i = self.edges.partition_point(|&e| e <= v).saturating_sub(1);
        self.counts[i] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn label(&self, i: usize) -> String {
        match self.edges.get(i + 1) {
            Some(hi) => format!("{}-{}", self.edges[i], hi - 1),
            None => format!(">={}", self.edges[i]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub backend: Backend,
    pub records: u64,
    pub instructions: u64,
    pub memory_accesses: u64,
    pub asid_switches: u64,

    pub l1_tlb_misses: u64,
    pub l1_tlb_mpki: f64,
    pub l2_tlb_misses: u64,
    pub l2_tlb_mpki: f64,
    pub ptw_count: u64,
    pub guest_ptw_count: u64,
    pub host_ptw_count: u64,
    pub l2_cache_tlb_hit_count: u64,
    pub avg_l2_tlb_miss_latency: f64,
    pub avg_ptw_latency: f64,
    pub ptw_latency_histogram: Histogram,

    pub translation_cycles: u64,
    pub data_cycles: u64,
    pub maintenance_cycles: u64,
    pub total_cycles: u64,

    pub l1d_cache: LevelStats,
    pub l2_cache: LevelStats,
    pub l3_cache: LevelStats,
    pub l2_cache_mpki: f64,
    pub dram_accesses: u64,

    pub final_tlb_blocks: u64,
    pub mean_translation_reach: f64,
    /// Instructions between consecutive timeline points.
    pub timeline_stride_instructions: u64,
    pub occupancy_timeline: Vec<u64>,
    pub reach_timeline: Vec<u64>,
    pub data_reuse_histogram: ReuseHistogram,
    pub tlb_reuse_histogram: ReuseHistogram,

    pub mmu: MmuCounters,
}

impl Stats {
    pub fn empty(backend: Backend) -> Self {
        Self {
            backend,
            records: 0,
            instructions: 0,
            memory_accesses: 0,
            asid_switches: 0,
            l1_tlb_misses: 0,
            l1_tlb_mpki: 0.0,
            l2_tlb_misses: 0,
            l2_tlb_mpki: 0.0,
            ptw_count: 0,
            guest_ptw_count: 0,
            host_ptw_count: 0,
            l2_cache_tlb_hit_count: 0,
            avg_l2_tlb_miss_latency: 0.0,
            avg_ptw_latency: 0.0,
            ptw_latency_histogram: Histogram::new(&PTW_LATENCY_EDGES),
            translation_cycles: 0,
            data_cycles: 0,
            maintenance_cycles: 0,
            total_cycles: 0,
            l1d_cache: LevelStats::default(),
            l2_cache: LevelStats::default(),
            l3_cache: LevelStats::default(),
            l2_cache_mpki: 0.0,
            dram_accesses: 0,
            final_tlb_blocks: 0,
            mean_translation_reach: 0.0,
            timeline_stride_instructions: 0,
            occupancy_timeline: Vec::new(),
            reach_timeline: Vec::new(),
            data_reuse_histogram: ReuseHistogram::default(),
            tlb_reuse_histogram: ReuseHistogram::default(),
            mmu: MmuCounters::default(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats always serialize")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// `metric,value` rows. Nested fields are dotted and arrays indexed.
    pub fn to_csv(&self) -> String {
        let v = serde_json::to_value(self).expect("stats always serialize");
        let mut out = String::from("metric,value\n");
        flatten(&mut out, "", &v);
        out
    }

    /// Writes `.dat` tables plus a `plot.gp` script that renders them.
    pub fn write_gnuplot(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut ptw = String::from("# bucket count\n");
        for (i, c) in self.ptw_latency_histogram.counts.iter().enumerate() {
            let _ = writeln!(ptw, "\"{}\" {c}", self.ptw_latency_histogram.label(i));
        }
        std::fs::write(dir.join("ptw_latency.dat"), ptw)?;
        for (name, h) in [
            ("data_reuse.dat", &self.data_reuse_histogram),
            ("tlb_reuse.dat", &self.tlb_reuse_histogram),
        ] {
            let mut s = String::from("# hits count\n");
            for (label, c) in ReuseHistogram::LABELS.iter().zip(h.buckets) {
                let _ = writeln!(s, "\"{label}\" {c}");
            }
            std::fs::write(dir.join(name), s)?;
        }
        let mut tl = String::from("# instructions tlb_blocks reach_bytes\n");
        for (i, (o, r)) in self.occupancy_timeline.iter().zip(&self.reach_timeline).enumerate() {
            let _ = writeln!(tl, "{} {o} {r}", (i as u64 + 1) * self.timeline_stride_instructions);
        }
        std::fs::write(dir.join("timeline.dat"), tl)?;
        std::fs::write(dir.join("plot.gp"), GNUPLOT_SCRIPT)
    }
}

const GNUPLOT_SCRIPT: &str = r#"set terminal pngcairo size 900,600
set style data histograms
set style fill solid 0.8
set boxwidth 0.8
set output 'ptw_latency.png'
set title 'Page-walk latency (cycles)'
plot 'ptw_latency.dat' using 2:xtic(1) notitle
set output 'reuse.png'
set title 'Hits before eviction'
plot 'data_reuse.dat' using 2:xtic(1) title 'data', 'tlb_reuse.dat' using 2 title 'TLB blocks'
set output 'reach.png'
set style data lines
set title 'Translation reach'
plot 'timeline.dat' using 1:3 title 'bytes'
"#;

fn flatten(out: &mut String, prefix: &str, v: &serde_json::Value) {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(out, &key, x);
            }
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(out, &format!("{prefix}[{i}]"), x);
            }
        }
        Value::String(s) => {
            let _ = writeln!(out, "{prefix},{s}");
        }
        other => {
            let _ = writeln!(out, "{prefix},{other}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_buckets() {
        let mut h = Histogram::new(&PTW_LATENCY_EDGES);
        for v in [0, 19, 20, 35, 639, 640, 10_000] {
            h.record(v);
        }
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[2], 1);
        assert_eq!(h.counts[10], 1);
        assert_eq!(h.counts[11], 2);
        assert_eq!(h.total(), 7);
        assert_eq!(h.label(0), "0-19");
        assert_eq!(h.label(11), ">=640");
    }

    #[test]
    fn json_round_trip_and_csv() {
        let mut s = Stats::empty(Backend::Victima);
        s.avg_l2_tlb_miss_latency = 0.1 + 0.2;
        s.mean_translation_reach = 1.0 / 3.0;
        s.reach_timeline = vec![1, 2];
        s.occupancy_timeline = vec![3, 4];
        let back = Stats::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        let csv = s.to_csv();
        assert!(csv.starts_with("metric,value\n"));
        assert!(csv.contains("\nbackend,victima\n"));
        assert!(csv.contains("reach_timeline[1],2\n"));
        assert!(csv.contains("mmu.ptw_count,0\n"));
    }

    #[test]
    fn gnuplot_files() {
        let dir = std::env::temp_dir().join(format!("vmsim-gp-{}", std::process::id()));
        let mut s = Stats::empty(Backend::Radix);
        s.ptw_latency_histogram.record(25);
        s.timeline_stride_instructions = 1000;
        s.reach_timeline = vec![4096];
        s.occupancy_timeline = vec![1];
        s.write_gnuplot(&dir).unwrap();
        let ptw = std::fs::read_to_string(dir.join("ptw_latency.dat")).unwrap();
        assert!(ptw.contains("\"20-29\" 1"));
        let tl = std::fs::read_to_string(dir.join("timeline.dat")).unwrap();
        assert!(tl.contains("1000 1 4096"));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
