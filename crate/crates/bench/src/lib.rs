//! Shared fixtures for the criterion benches in `benches/`.

use vmsim::simkit::{Generator, GeneratorKind, GeneratorSpec, TraceRecord};

/// `n` records over a 1 GiB footprint, materialized so that generation is
/// not part of what gets measured.
pub fn workload(kind: GeneratorKind, n: u64) -> Vec<TraceRecord> {
    let spec = GeneratorSpec {
        kind,
        footprint_bytes: 1 << 30,
        record_count: n,
        seed: 42,
        ..GeneratorSpec::default()
    };
    Generator::new(spec).expect("valid spec").collect()
}
