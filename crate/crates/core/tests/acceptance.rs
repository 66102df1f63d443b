//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL ...` line with the measured quantity.

use std::collections::HashMap;

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vmsim::cachehier::{
    derive_tag_widths, srrip_insert_rrpv, srrip_on_hit, srrip_victim, BlockKind, BlockMeta, CacheConfig,
    CacheHierarchy, ReplacementPolicy, TlbBlockInsert, TlbBlockPayload, TransformOutcome, RRIP_MAX,
};
use vmsim::mmu::{Backend, BackendConfig, MaintenanceCmd, Mmu};
use vmsim::pagetable::{update_ptw_counters, Pte, PTW_COST_MAX, PTW_FREQ_MAX};
use vmsim::predictor::{consult, predict, PredictorBox, PredictorConfig};
use vmsim::simkit::{run_batch, GeneratorKind, GeneratorSpec, Stats, TraceInput};
use vmsim::tlbhier::{AccessKind, TlbConfig};
use vmsim::{Asid, MachineSpec, PageSize, PhysAddr, SimConfig, VirtAddr};

fn report(n: u32, ok: bool, detail: String) {
    // Straight to the handle so the line survives libtest's output capture.
    let line = format!("criterion {n}: {} {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::Write::write_all(&mut std::io::stderr(), line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn mmu(kind: Backend, f: impl FnOnce(&mut TlbConfig, &mut BackendConfig, &mut PredictorConfig)) -> Mmu {
    let mut tlb = TlbConfig::default();
    let mut backend = BackendConfig {
        kind,
        ..BackendConfig::default()
    };
    let mut predictor = PredictorConfig::default();
    f(&mut tlb, &mut backend, &mut predictor);
    let mut cache = CacheConfig::default();
    if kind.uses_tlb_blocks() {
        cache.l2.policy = ReplacementPolicy::TlbAwareSrrip;
    }
    Mmu::new(&MachineSpec::default(), &tlb, &cache, &predictor, &backend, 3).unwrap()
}

#[test]
fn criterion_01_tag_arithmetic() {
    // 1 MiB, 16-way, 64 B lines: 1024 sets.
    let w = derive_tag_widths(&MachineSpec::default(), 1024).unwrap();
    let got = (w.data_tag_bits, w.tlb_tag_bits, w.asid_bits);
    report(1, got == (36, 23, 11), format!("data/tlb/asid = {got:?}, want (36, 23, 11)"));
}

#[test]
fn criterion_02_nested_walk_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gvas: Vec<u64> = (0..1000).map(|_| rng.random_range(0..1u64 << 47)).collect();
    let mut bare = mmu(Backend::NestedPaging, |t, b, _| {
        t.nested.entries = 0;
        b.pwc.enabled = false;
        b.large_page_fraction = 0.0;
        b.host_large_page_fraction = 0.0;
    });
    let mut cached = mmu(Backend::NestedPaging, |_, b, _| b.large_page_fraction = 0.3);
    let (mut exact, mut max_cached) = (0, 0);
    for &va in &gvas {
        for m in [&mut bare, &mut cached] {
            m.tlbs.invalidate(&vmsim::tlbhier::InvalidationScope::All);
        }
        if bare.translate(VirtAddr(va), Asid(0), AccessKind::Load).unwrap().pt_accesses == 24 {
            exact += 1;
        }
        let r = cached.translate(VirtAddr(va), Asid(0), AccessKind::Load).unwrap();
        max_cached = max_cached.max(r.pt_accesses);
    }
    report(
        2,
        exact == gvas.len() && max_cached <= 24,
        format!("{exact}/{} bare walks at 24 accesses, cached max {max_cached}", gvas.len()),
    );
}

#[test]
fn criterion_03_predictor_oracle() {
    let b = PredictorBox::default();
    let mut agree = 0;
    for f in 0..=PTW_FREQ_MAX {
        for c in 0..=PTW_COST_MAX {
            let brute = (1..=7).contains(&f) && (1..=12).contains(&c);
            agree += (predict(f, c, &b) == brute) as u32;
        }
    }
    // The figure's (12, 7) corner is cost 12 at frequency 7.
    let corners = predict(1, 1, &b) && predict(7, 12, &b);
    report(3, agree == 128 && corners, format!("{agree}/128 pairs agree, corners positive: {corners}"));
}

#[test]
fn criterion_04_counter_semantics() {
    let mut runner = TestRunner::new(PtConfig {
        cases: 10_000,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let strategy = proptest::collection::vec(0u32..4, 0..64);
    let res = runner.run(&strategy, |seq| {
        let mut pte = Pte::new(1, PageSize::Size4K);
        for (i, &dram) in seq.iter().enumerate() {
            let before = pte;
            update_ptw_counters(&mut pte, dram);
            prop_assert!(pte.ptw_freq >= before.ptw_freq && pte.ptw_cost >= before.ptw_cost);
            prop_assert_eq!(pte.ptw_freq as usize, (i + 1).min(7));
            prop_assert!(pte.ptw_freq <= 7 && pte.ptw_cost <= 15);
        }
        let costly = seq.iter().filter(|&&d| d > 0).count();
        prop_assert_eq!(pte.ptw_cost as usize, costly.min(15));
        Ok(())
    });
    report(4, res.is_ok(), format!("10000 random walk sequences: {res:?}"));
}

#[test]
fn criterion_05_tlb_block_semantics() {
    let spec = MachineSpec::default();
    let mut cfg = CacheConfig::default();
    cfg.l2.policy = ReplacementPolicy::TlbAwareSrrip;
    let asid = Asid(4);
    let base = 0x7f_0000_0000u64 >> 12;
    let mut failures = Vec::new();
    for victim in 0..8u64 {
        let mut h = CacheHierarchy::new(&cfg, &spec).unwrap();
        let req = TlbBlockInsert {
            leaf_line_pa: PhysAddr(0x8000_0040),
            vpn_base: base,
            asid,
            page_size: PageSize::Size4K,
            nested: false,
            payload: TlbBlockPayload {
                pfns: std::array::from_fn(|i| Some(0x5000 + i as u64)),
            },
        };
        let outcome = h.transform_to_tlb_block(&req);
        let all_hit = (0..8).all(|i| h.probe_tlb_block(base + i, asid, false).entry.is_some());
        let cmd = MaintenanceCmd::Shootdown {
            vpn: base + victim,
            asid,
        };
        h.invalidate_tlb_blocks(&cmd.scope(), false);
        let all_miss = (0..8).all(|i| h.probe_tlb_block(base + i, asid, false).entry.is_none());
        if outcome == TransformOutcome::AsidTooWide || !all_hit || !all_miss {
            failures.push(victim);
        }
    }
    report(
        5,
        failures.is_empty(),
        format!("group hit after transform, miss after shootdown; failing victims {failures:?}"),
    );
}

#[test]
fn criterion_06_replacement_policy() {
    let blk = |kind, rrpv| {
        let mut b = BlockMeta::default();
        (b.valid, b.kind, b.rrpv) = (true, kind, rrpv);
        b
    };
    let insert_ok = srrip_insert_rrpv(BlockKind::TlbBlock, 6.0) == 0
        && srrip_insert_rrpv(BlockKind::TlbBlock, 4.0) == RRIP_MAX - 1
        && srrip_insert_rrpv(BlockKind::Data, 6.0) == RRIP_MAX - 1;
    let (mut t, mut d) = (blk(BlockKind::TlbBlock, 3), blk(BlockKind::Data, 3));
    srrip_on_hit(&mut t, 6.0);
    srrip_on_hit(&mut d, 6.0);
    let hit_ok = t.rrpv == 0 && d.rrpv == 2;
    // One skip: the TLB block at max RRPV is passed over for the data block.
    let mut set = vec![blk(BlockKind::TlbBlock, 3), blk(BlockKind::Data, 3), blk(BlockKind::Data, 1)];
    let skip_ok = srrip_victim(&mut set, true, 6.0) == 1;
    let mut all_tlb = vec![blk(BlockKind::TlbBlock, 2); 4];
    let all_ok = srrip_victim(&mut all_tlb, true, 6.0) == 0;
    report(
        6,
        insert_ok && hit_ok && skip_ok && all_ok,
        format!("insert {insert_ok}, hit {hit_ok}, skip {skip_ok}, all-TLB eviction {all_ok}"),
    );
}

#[test]
fn criterion_07_functional_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ops: Vec<(Asid, u64, bool)> = (0..100_000)
        .map(|_| {
            (
                Asid(rng.random_range(0..4)),
                rng.random_range(0..1u64 << 34),
                rng.random_bool(0.0005),
            )
        })
        .collect();
    let mut mismatches: HashMap<Backend, u64> = HashMap::new();
    let mut per_class: HashMap<bool, Vec<u64>> = HashMap::new();
    for kind in Backend::ALL {
        let mut m = mmu(kind, |_, b, p| {
            b.large_page_fraction = 0.3;
            p.l2_cache_mpki_threshold = 0.0;
        });
        // Flat map filled from the page tables at first touch; every later
        // translation of the page must agree with it.
        let mut flat: HashMap<(Asid, u64), u64> = HashMap::new();
        let mut pas = Vec::with_capacity(ops.len());
        let bad = mismatches.entry(kind).or_default();
        for &(asid, va, shoot) in &ops {
            if shoot {
                m.maintenance(&MaintenanceCmd::Shootdown { vpn: va >> 12, asid });
            }
            let r = m.translate(VirtAddr(va), asid, AccessKind::Load).unwrap();
            m.on_retire(4);
            let frame = *flat
                .entry((asid, va >> 12))
                .or_insert_with(|| m.functional_translate(VirtAddr(va), asid).unwrap().0 >> 12);
            if r.pa.0 >> 12 != frame || r.pa.0 & 0xfff != va & 0xfff {
                *bad += 1;
            }
            pas.push(r.pa.0);
        }
        match per_class.get(&kind.is_virtualized()) {
            Some(reference) if reference != &pas => *bad += 1,
            Some(_) => {}
            None => {
                per_class.insert(kind.is_virtualized(), pas);
            }
        }
    }
    let total: u64 = mismatches.values().sum();
    report(
        7,
        total == 0,
        format!("{} backends x 100000 records, {total} mismatches", Backend::ALL.len()),
    );
}

fn uniform_4gib() -> GeneratorSpec {
    GeneratorSpec {
        kind: GeneratorKind::UniformRandom,
        footprint_bytes: 4 << 30,
        record_count: 5_000_000,
        seed: 42,
        ..GeneratorSpec::default()
    }
}

fn run_pair(a: Backend, b: Backend) -> (Stats, Stats) {
    let g = uniform_4gib();
    let jobs: Vec<_> = [a, b]
        .into_iter()
        .map(|k| {
            let mut c = SimConfig::default();
            c.backend.kind = k;
            if k.uses_tlb_blocks() {
                c.cache.l2.policy = ReplacementPolicy::TlbAwareSrrip;
            }
            (c, TraceInput::Generator(g))
        })
        .collect();
    let mut out = run_batch(&jobs, 2).into_iter().map(Result::unwrap);
    (out.next().unwrap(), out.next().unwrap())
}

fn reduction(base: f64, new: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        1.0 - new / base
    }
}

#[test]
fn criterion_08_ptw_reduction() {
    let (radix, victima) = run_pair(Backend::Radix, Backend::Victima);
    let red = reduction(radix.ptw_count as f64, victima.ptw_count as f64);
    report(
        8,
        victima.ptw_count <= radix.ptw_count && red >= 0.30,
        format!(
            "radix {} walks, victima {} walks, reduction {:.1}% (need >= 30%)",
            radix.ptw_count,
            victima.ptw_count,
            red * 100.0
        ),
    );
}

#[test]
fn criterion_09_virtualized_direction() {
    let (np, vv) = run_pair(Backend::NestedPaging, Backend::VictimaVirt);
    let host = reduction(np.mmu.host_pt_accesses as f64, vv.mmu.host_pt_accesses as f64);
    let lat = reduction(np.avg_l2_tlb_miss_latency, vv.avg_l2_tlb_miss_latency);
    let block_share = vv.l2_cache_tlb_hit_count as f64 / vv.l2_tlb_misses.max(1) as f64;
    report(
        9,
        host >= 0.90 && lat >= 0.40,
        format!(
            "host PT accesses {} -> {} ({:.1}%, need >= 90%), avg L2 TLB miss latency {:.1} -> {:.1} \
             ({:.1}%, need >= 40%), guest TLB-block hits resolve {:.1}% of L2 TLB misses",
            np.mmu.host_pt_accesses,
            vv.mmu.host_pt_accesses,
            host * 100.0,
            np.avg_l2_tlb_miss_latency,
            vv.avg_l2_tlb_miss_latency,
            lat * 100.0,
            block_share * 100.0
        ),
    );
}

#[test]
fn criterion_10_reach_accounting() {
    let mut cfg = CacheConfig::default();
    cfg.l2.policy = ReplacementPolicy::TlbAwareSrrip;
    let mut h = CacheHierarchy::new(&cfg, &MachineSpec::default()).unwrap();
    let blocks = cfg.l2.size_bytes / 64;
    for g in 0..blocks {
        h.transform_to_tlb_block(&TlbBlockInsert {
            leaf_line_pa: PhysAddr(0x1_0000_0000 + g * 64),
            vpn_base: g * 8,
            asid: Asid(1),
            page_size: PageSize::Size4K,
            nested: false,
            payload: TlbBlockPayload {
                pfns: std::array::from_fn(|i| Some(g * 8 + i as u64)),
            },
        });
    }
    let reach = h.translation_reach();
    report(
        10,
        h.tlb_block_count() == 32768 && reach == 1 << 30,
        format!("{} blocks resident, reach {reach} bytes (want 1 GiB)", h.tlb_block_count()),
    );
}

#[test]
fn criterion_11_bypass_rule() {
    let cfg = PredictorConfig::default();
    let outside: Vec<(u8, u8)> = (0..=PTW_FREQ_MAX)
        .flat_map(|f| (0..=PTW_COST_MAX).map(move |c| (f, c)))
        .filter(|&(f, c)| !predict(f, c, &cfg.bounds))
        .collect();
    let forced = outside.iter().all(|&(f, c)| consult(5.0, f, c, &cfg));
    let calm = outside.iter().all(|&(f, c)| !consult(4.99, f, c, &cfg));

    // End to end: a fresh page carries (0, 0), which is outside the box.
    let blocks_made = |mpki: f64| {
        let mut m = mmu(Backend::Victima, |_, b, _| b.large_page_fraction = 0.0);
        m.caches.l2_tracker.current_mpki = mpki;
        m.translate(VirtAddr(0x1234_5000), Asid(0), AccessKind::Load).unwrap();
        m.counters.blocks_transformed + m.counters.blocks_inserted_fresh
    };
    let (hi, lo) = (blocks_made(6.0), blocks_made(1.0));
    report(
        11,
        forced && calm && hi == 1 && lo == 0,
        format!(
            "{} out-of-box pairs: insert at MPKI 5 {forced}, none at 4.99 {calm}; mmu blocks at MPKI 6/1: {hi}/{lo}",
            outside.len()
        ),
    );
}

#[test]
fn criterion_12_determinism() {
    let g = GeneratorSpec {
        record_count: 300_000,
        ..uniform_4gib()
    };
    let mut cfg = SimConfig::default();
    cfg.backend.kind = Backend::Victima;
    cfg.cache.l2.policy = ReplacementPolicy::TlbAwareSrrip;
    let jobs = vec![(cfg.clone(), TraceInput::Generator(g)), (cfg, TraceInput::Generator(g))];
    let out: Vec<String> = run_batch(&jobs, 2).into_iter().map(|r| r.unwrap().to_json()).collect();
    report(
        12,
        out[0] == out[1],
        format!("two runs, {} bytes of stats, identical: {}", out[0].len(), out[0] == out[1]),
    );
}
