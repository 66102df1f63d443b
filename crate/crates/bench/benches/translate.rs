use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use vmsim::simkit::{open_trace, run, GeneratorKind, TraceWriter};
use vmsim::{Backend, SimConfig};
use vmsim_bench::workload;

const RECORDS: u64 = 20_000;

fn simulate(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    g.throughput(Throughput::Elements(RECORDS));
    g.sample_size(10);
    for kind in [GeneratorKind::UniformRandom, GeneratorKind::Zipfian] {
        let trace = workload(kind, RECORDS);
        for backend in [Backend::Radix, Backend::Victima, Backend::NestedPaging, Backend::VictimaVirt] {
            let mut cfg = SimConfig::default();
            cfg.backend.kind = backend;
            let id = BenchmarkId::new(format!("{kind:?}"), format!("{backend:?}"));
            g.bench_with_input(id, &trace, |b, t| {
                b.iter(|| run(&cfg, t.iter().cloned().map(Ok)).unwrap().ptw_count)
            });
        }
    }
    g.finish();
}

fn codec(c: &mut Criterion) {
    let trace = workload(GeneratorKind::UniformRandom, RECORDS);
    let mut w = TraceWriter::new(Vec::new(), RECORDS).unwrap();
    for r in &trace {
        w.write(r).unwrap();
    }
    let bytes = w.finish().unwrap();

    let mut g = c.benchmark_group("vmt1");
    g.throughput(Throughput::Elements(RECORDS));
    g.bench_function("encode", |b| {
        b.iter(|| {
            let mut w = TraceWriter::new(Vec::with_capacity(bytes.len()), RECORDS).unwrap();
            for r in &trace {
                w.write(r).unwrap();
            }
            w.finish().unwrap().len()
        })
    });
    g.bench_function("decode", |b| {
        b.iter(|| {
            let data = black_box(bytes.clone());
            open_trace(std::io::Cursor::new(data)).unwrap().map(|r| r.unwrap().va.0).sum::<u64>()
        })
    });
    g.finish();
}

fn generate(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate");
    g.throughput(Throughput::Elements(RECORDS));
    for kind in [
        GeneratorKind::UniformRandom,
        GeneratorKind::Strided,
        GeneratorKind::Zipfian,
        GeneratorKind::PointerChase,
    ] {
        g.bench_function(format!("{kind:?}"), |b| b.iter(|| workload(kind, RECORDS).len()));
    }
    g.finish();
}

criterion_group!(benches, simulate, codec, generate);
criterion_main!(benches);
