//! `vmsim`: generate traces, run the simulator, compare backends.

mod commands;
mod error;
mod units;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vmsim::mmu::Backend;
use vmsim::simkit::GeneratorKind;

#[derive(Parser, Debug)]
#[command(name = "vmsim", version, about = "Trace-driven address translation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic trace.
    Gen(GenArgs),
    /// Simulate one configuration and write its statistics.
    Run(RunArgs),
    /// Simulate several backends on the same trace and tabulate them.
    Compare(CompareArgs),
    /// Print the default configuration or summarize a stats file.
    Report(ReportArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Uniform,
    Strided,
    Zipfian,
    PointerChase,
}

impl From<KindArg> for GeneratorKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Uniform => GeneratorKind::UniformRandom,
            KindArg::Strided => GeneratorKind::Strided,
            KindArg::Zipfian => GeneratorKind::Zipfian,
            KindArg::PointerChase => GeneratorKind::PointerChase,
        }
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Access pattern.
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Bytes touched, e.g. 4096, 64KiB, 4GiB. Must be non-zero.
    #[arg(long, value_parser = units::parse_footprint)]
    footprint: u64,
    /// Number of records.
    #[arg(long)]
    records: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Stride for `strided`, in bytes.
    #[arg(long, value_parser = units::parse_bytes, default_value = "4096")]
    stride: u64,
    /// Power-law exponent for `zipfian`.
    #[arg(long, default_value_t = 1.0)]
    zipf_s: f64,
    /// Lowest virtual address of the footprint.
    #[arg(long, value_parser = units::parse_bytes, default_value = "0")]
    base_va: u64,
    /// Instructions retired per record.
    #[arg(long, default_value_t = 4)]
    instructions_per_access: u32,
    /// Probability that a record is a store.
    #[arg(long, default_value_t = 0.0)]
    store_fraction: f64,
    /// ASID stamped on every record.
    #[arg(long, default_value_t = 0)]
    asid: u8,
    /// Write the line-oriented text form instead of VMT1 binary.
    #[arg(long)]
    text: bool,
    /// Output file.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Trace file, overriding the configuration's trace section.
    #[arg(short, long)]
    trace: Option<PathBuf>,
    /// Backend, overriding `backend.kind`.
    #[arg(short, long)]
    backend: Option<Backend>,
    /// Seed, overriding the configuration's.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for stats.json, stats.csv, meta.json and plots/.
    #[arg(short, long, default_value = "vmsim-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Two or more backends; the first is the normalization baseline.
    #[arg(required = true, num_args = 2..)]
    backends: Vec<Backend>,
    /// TOML configuration shared by every backend.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Trace file, overriding the configuration's trace section.
    #[arg(short, long)]
    trace: Option<PathBuf>,
    /// Seed, overriding the configuration's.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for compare.csv, compare.json and per-backend stats.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("what").required(true).args(["defaults", "stats"]))]
struct ReportArgs {
    /// Print the full default configuration as TOML.
    #[arg(long)]
    defaults: bool,
    /// Stats JSON file to summarize.
    stats: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Run(a) => commands::run(a),
        Command::Compare(a) => commands::compare(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vmsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
