//! Traces, workload generators, the simulation loop and its statistics.

mod gen;
mod run;
mod stats;
mod trace;

pub use gen::{Generator, GeneratorKind, GeneratorSpec};
pub use run::{run, run_batch, run_config, RecordStream, TraceInput};
pub use stats::{Histogram, Stats, PTW_LATENCY_EDGES};
pub use trace::{
    open_trace, parse_text_line, BinaryReader, Op, TextReader, TraceRecord, TraceWriter, HEADER_BYTES, MAGIC,
    RECORD_BYTES, VERSION,
};
