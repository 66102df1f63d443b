use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use vmsim::simkit::{open_trace, run_batch, Generator, GeneratorSpec, RecordStream, Stats, TraceInput, TraceWriter};
use vmsim::{Backend, SimConfig};

use crate::error::{CliError, CliResult};
use crate::units::human_bytes;
use crate::{CompareArgs, GenArgs, ReportArgs, RunArgs};

pub fn gen(a: GenArgs) -> CliResult<()> {
    let spec = GeneratorSpec {
        kind: a.kind.into(),
        footprint_bytes: a.footprint,
        record_count: a.records,
        seed: a.seed,
        stride: a.stride,
        zipf_exponent: a.zipf_s,
        base_va: a.base_va,
        instructions_per_access: a.instructions_per_access,
        store_fraction: a.store_fraction,
        asid: a.asid,
        ..GeneratorSpec::default()
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let file = File::create(&a.output).map_err(|e| CliError::io(&a.output, e))?;
    let mut out = BufWriter::new(file);
    let io = |e: std::io::Error| CliError::io(&a.output, e);
    if a.text {
        writeln!(out, "# vmsim text trace: {:?}, seed {}", spec.kind, spec.seed).map_err(io)?;
        for r in Generator::new(spec)? {
            let op = match r.op {
                vmsim::simkit::Op::Access(vmsim::AccessKind::Store) => "S",
                vmsim::simkit::Op::Access(vmsim::AccessKind::InstrFetch) => "I",
                _ => "L",
            };
            writeln!(out, "{op} {:#x} {} {}", r.va.0, r.icount_delta, r.asid.0).map_err(io)?;
        }
        out.flush().map_err(io)?;
    } else {
        let mut w = TraceWriter::new(out, spec.record_count)?;
        for r in Generator::new(spec)? {
            w.write(&r)?;
        }
        w.finish()?;
    }
    println!(
        "wrote {} records ({:?}, footprint {}, seed {}) to {}",
        spec.record_count,
        spec.kind,
        human_bytes(spec.footprint_bytes as f64),
        spec.seed,
        a.output.display()
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> CliResult<SimConfig> {
    let Some(p) = path else {
        return Ok(SimConfig::default());
    };
    let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
    let mut cfg: SimConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?;
    // Trace paths in a config file are relative to the file.
    if let (Some(t), Some(dir)) = (&cfg.trace.path, p.parent()) {
        if t.is_relative() {
            cfg.trace.path = Some(dir.join(t));
        }
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut SimConfig, trace: Option<PathBuf>, seed: Option<u64>) -> CliResult<()> {
    if let Some(t) = trace {
        cfg.trace.path = Some(t);
        cfg.trace.generator = None;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    TraceInput::from_config(cfg)?;
    Ok(())
}

/// SHA-256 over the canonical JSON form of the configuration.
pub fn config_hash(cfg: &SimConfig) -> String {
    let json = serde_json::to_string(cfg).expect("configs always serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn open_input(cfg: &SimConfig) -> CliResult<RecordStream> {
    match TraceInput::from_config(cfg)? {
        TraceInput::File(p) => {
            let f = File::open(&p).map_err(|e| CliError::io(&p, e))?;
            Ok(open_trace(f)?)
        }
        g => Ok(g.open()?),
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct Meta<'a> {
    vmsim_version: &'a str,
    config_hash: String,
    seed: u64,
    backend: Backend,
    trace: String,
}

fn trace_label(cfg: &SimConfig) -> String {
    match (&cfg.trace.path, &cfg.trace.generator) {
        (Some(p), _) => p.display().to_string(),
        (None, Some(g)) => format!("generated {:?} seed {}", g.kind, g.seed),
        _ => String::new(),
    }
}

fn write_stats(dir: &Path, cfg: &SimConfig, hash: &str, stats: &Stats) -> CliResult<()> {
    create_dir(dir)?;
    write_file(&dir.join("stats.json"), &stats.to_json())?;
    let csv = stats.to_csv();
    let (head, rows) = csv.split_once('\n').unwrap_or((&csv, ""));
    write_file(
        &dir.join("stats.csv"),
        &format!("{head}\nconfig_hash,{hash}\nseed,{}\n{rows}", cfg.seed),
    )?;
    let meta = Meta {
        vmsim_version: env!("CARGO_PKG_VERSION"),
        config_hash: hash.to_owned(),
        seed: cfg.seed,
        backend: cfg.backend.kind,
        trace: trace_label(cfg),
    };
    write_file(&dir.join("meta.json"), &serde_json::to_string_pretty(&meta).unwrap())?;
    let toml = toml::to_string_pretty(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&dir.join("config.toml"), &toml)?;
    let plots = dir.join("plots");
    stats.write_gnuplot(&plots).map_err(|e| CliError::io(&plots, e))
}

pub fn run(a: RunArgs) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(b) = a.backend {
        cfg.backend.kind = b;
    }
    apply_overrides(&mut cfg, a.trace, a.seed)?;
    let cfg = cfg.effective();
    let hash = config_hash(&cfg);
    let stats = vmsim::run(&cfg, open_input(&cfg)?)?;
    write_stats(&a.out, &cfg, &hash, &stats)?;
    println!("backend        {}", stats.backend);
    println!("config hash    {hash}");
    println!("seed           {}", cfg.seed);
    print_summary(&stats);
    println!("wrote {}", a.out.join("stats.json").display());
    Ok(())
}

fn print_summary(s: &Stats) {
    println!("records        {}", s.records);
    println!("instructions   {}", s.instructions);
    println!("L1 TLB MPKI    {:.3}", s.l1_tlb_mpki);
    println!("L2 TLB MPKI    {:.3}", s.l2_tlb_mpki);
    println!("page walks     {}", s.ptw_count);
    if s.backend.is_virtualized() {
        println!("  guest walks  {}", s.guest_ptw_count);
        println!("  host walks   {}", s.host_ptw_count);
        println!("  host PT refs {}", s.mmu.host_pt_accesses);
    }
    println!("L2$ TLB hits   {}", s.l2_cache_tlb_hit_count);
    println!("avg L2 TLB miss latency {:.2} cycles", s.avg_l2_tlb_miss_latency);
    println!("L2 cache MPKI  {:.3}", s.l2_cache_mpki);
    println!("mean reach     {}", human_bytes(s.mean_translation_reach));
}

/// One line of a comparison, normalized to the first backend.
#[derive(Debug, Serialize)]
struct CompareRow {
    backend: Backend,
    ptw_count: u64,
    ptw_reduction_pct: f64,
    avg_l2_tlb_miss_latency: f64,
    latency_ratio: Option<f64>,
    mean_reach_bytes: f64,
    l2_cache_tlb_hit_share_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    host_pt_accesses: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    host_pt_reduction_pct: Option<f64>,
}

fn reduction_pct(base: u64, x: u64) -> f64 {
    if base == 0 {
        0.0
    } else {
        100.0 * (1.0 - x as f64 / base as f64)
    }
}

fn compare_rows(stats: &[Stats]) -> Vec<CompareRow> {
    let base = &stats[0];
    let virt = stats.iter().any(|s| s.backend.is_virtualized());
    stats
        .iter()
        .map(|s| CompareRow {
            backend: s.backend,
            ptw_count: s.ptw_count,
            ptw_reduction_pct: reduction_pct(base.ptw_count, s.ptw_count),
            avg_l2_tlb_miss_latency: s.avg_l2_tlb_miss_latency,
            latency_ratio: if base.avg_l2_tlb_miss_latency > 0.0 {
                Some(s.avg_l2_tlb_miss_latency / base.avg_l2_tlb_miss_latency)
            } else if s.avg_l2_tlb_miss_latency == 0.0 {
                Some(1.0)
            } else {
                None
            },
            mean_reach_bytes: s.mean_translation_reach,
            l2_cache_tlb_hit_share_pct: if s.l2_tlb_misses == 0 {
                0.0
            } else {
                100.0 * s.l2_cache_tlb_hit_count as f64 / s.l2_tlb_misses as f64
            },
            host_pt_accesses: virt.then_some(s.mmu.host_pt_accesses),
            host_pt_reduction_pct: virt.then(|| reduction_pct(base.mmu.host_pt_accesses, s.mmu.host_pt_accesses)),
        })
        .collect()
}

fn render_table(rows: &[CompareRow]) -> String {
    let virt = rows.iter().any(|r| r.host_pt_accesses.is_some());
    let mut out = format!(
        "{:<20} {:>12} {:>10} {:>12} {:>9} {:>12} {:>10}",
        "backend", "ptw", "ptw red%", "l2tlb lat", "lat ratio", "mean reach", "l2$ hit%"
    );
    if virt {
        out += &format!(" {:>14} {:>11}", "host pt refs", "host red%");
    }
    out.push('\n');
    for r in rows {
        let ratio = r.latency_ratio.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        out += &format!(
            "{:<20} {:>12} {:>10.2} {:>12.2} {:>9} {:>12} {:>10.2}",
            r.backend.name(),
            r.ptw_count,
            r.ptw_reduction_pct,
            r.avg_l2_tlb_miss_latency,
            ratio,
            human_bytes(r.mean_reach_bytes),
            r.l2_cache_tlb_hit_share_pct
        );
        if let (Some(h), Some(red)) = (r.host_pt_accesses, r.host_pt_reduction_pct) {
            out += &format!(" {h:>14} {red:>11.2}");
        }
        out.push('\n');
    }
    out
}

fn render_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(
        "backend,ptw_count,ptw_reduction_pct,avg_l2_tlb_miss_latency,latency_ratio,mean_reach_bytes,l2_cache_tlb_hit_share_pct,host_pt_accesses,host_pt_reduction_pct\n",
    );
    let opt = |o: Option<String>| o.unwrap_or_default();
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.backend.name(),
            r.ptw_count,
            r.ptw_reduction_pct,
            r.avg_l2_tlb_miss_latency,
            opt(r.latency_ratio.map(|x| x.to_string())),
            r.mean_reach_bytes,
            r.l2_cache_tlb_hit_share_pct,
            opt(r.host_pt_accesses.map(|x| x.to_string())),
            opt(r.host_pt_reduction_pct.map(|x| x.to_string())),
        );
    }
    out
}

/// Worker count: `VMSIM_THREADS` when set, else the machine's parallelism.
fn thread_count() -> CliResult<usize> {
    match std::env::var("VMSIM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("VMSIM_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn compare(a: CompareArgs) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    apply_overrides(&mut cfg, a.trace, a.seed)?;
    let cfg = cfg.effective();
    let input = TraceInput::from_config(&cfg)?;
    if let TraceInput::File(p) = &input {
        File::open(p).map_err(|e| CliError::io(p, e))?;
    }
    let configs: Vec<SimConfig> = a
        .backends
        .iter()
        .map(|&b| {
            let mut c = cfg.clone();
            c.backend.kind = b;
            c
        })
        .collect();
    let jobs: Vec<_> = configs.iter().map(|c| (c.clone(), input.clone())).collect();
    let mut stats = Vec::with_capacity(jobs.len());
    for r in run_batch(&jobs, thread_count()?) {
        stats.push(r?);
    }
    let rows = compare_rows(&stats);
    println!("config hash {} seed {}", config_hash(&cfg), cfg.seed);
    print!("{}", render_table(&rows));
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(&out.join("compare.csv"), &render_csv(&rows))?;
        write_file(&out.join("compare.json"), &serde_json::to_string_pretty(&rows).unwrap())?;
        for (i, (c, s)) in configs.iter().zip(&stats).enumerate() {
            let dir = out.join(format!("{i}-{}", c.backend.kind.name()));
            write_stats(&dir, c, &config_hash(c), s)?;
        }
    }
    Ok(())
}

pub fn report(a: ReportArgs) -> CliResult<()> {
    if a.defaults {
        let toml = toml::to_string_pretty(&SimConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
        print!("{toml}");
        return Ok(());
    }
    let path = a.stats.expect("clap requires one of the two");
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let stats = Stats::from_json(&text).map_err(|e| vmsim::Error::Parse {
        index: 0,
        reason: format!("{}: {e}", path.display()),
    })?;
    println!("backend        {}", stats.backend);
    print_summary(&stats);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_comparison_is_neutral() {
        let mut s = Stats::empty(Backend::Radix);
        s.ptw_count = 100;
        s.avg_l2_tlb_miss_latency = 40.0;
        let rows = compare_rows(&[s.clone(), s]);
        assert_eq!(rows[1].ptw_reduction_pct, 0.0);
        assert_eq!(rows[1].latency_ratio, Some(1.0));
        assert!(rows[1].host_pt_accesses.is_none());
    }

    #[test]
    fn virtualized_rows_carry_host_columns() {
        let mut np = Stats::empty(Backend::NestedPaging);
        np.mmu.host_pt_accesses = 1000;
        let mut vv = Stats::empty(Backend::VictimaVirt);
        vv.mmu.host_pt_accesses = 10;
        let rows = compare_rows(&[np, vv]);
        assert_eq!(rows[1].host_pt_reduction_pct, Some(99.0));
        assert!(render_table(&rows).contains("host red%"));
    }

    #[test]
    fn hash_tracks_config() {
        let a = SimConfig::default();
        let mut b = a.clone();
        b.seed = 9;
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
