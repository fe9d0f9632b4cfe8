//! Runs one of the out-of-place vs baseline benchmarks and writes a CSV.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use oopdbg_core::bench::{self, BenchConfig, Mode, BENCHES};

#[derive(Debug, Parser)]
#[command(name = "oopdbg-bench", version, about = "Benchmark out-of-place debugging against the remote baseline")]
struct Args {
    /// One of: session-init, bytes-vs-sessions, bytes-vs-stack, patch-bytes,
    /// step-latency, idle-overhead, remote-read, all.
    bench: String,
    /// oop, baseline or both.
    #[arg(long, env = "OOPDBG_MODE", default_value = "both")]
    mode: String,
    #[arg(long, env = "OOPDBG_LATENCY_MS", default_value_t = 0)]
    latency_ms: u64,
    #[arg(long, env = "OOPDBG_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long, env = "OOPDBG_OUT", default_value = "report.csv")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let a = Args::parse();
    if !BENCHES.contains(&a.bench.as_str()) {
        eprintln!("oopdbg-bench: unknown benchmark {:?}; expected one of {}", a.bench, BENCHES.join(", "));
        return ExitCode::from(2);
    }
    let Some(modes) = Mode::parse_set(&a.mode) else {
        eprintln!("oopdbg-bench: --mode must be oop, baseline or both");
        return ExitCode::from(2);
    };
    let cfg = BenchConfig { modes, latency: Duration::from_millis(a.latency_ms), seed: a.seed };
    let rep = match bench::run(&a.bench, &cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("oopdbg-bench: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = rep.write_csv(&a.out) {
        eprintln!("oopdbg-bench: {}: {e}", a.out.display());
        return ExitCode::from(2);
    }
    for c in &rep.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if rep.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
