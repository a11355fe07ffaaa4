use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use uniheap::heapctl::{self, BenchConfig, Workload};
use uniheap::{HeapSession, OpenMode};

#[derive(Parser)]
#[command(name = "heapctl", about = "Create, inspect, verify and benchmark heap files")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Format a new heap file.
    Create {
        #[arg(long)]
        path: PathBuf,
        /// Size in bytes; accepts K, M and G suffixes.
        #[arg(long, value_parser = parse_size)]
        size: u64,
        #[arg(long)]
        name: String,
        /// Overwrite an existing heap.
        #[arg(long)]
        force: bool,
    },
    /// Show header, regions, roots and plasses.
    Info {
        #[arg(long)]
        path: PathBuf,
    },
    /// Check the persisted image for invariant violations.
    Verify {
        #[arg(long)]
        path: PathBuf,
    },
    /// Run a garbage collection.
    Gc {
        #[arg(long)]
        path: PathBuf,
    },
    /// Run a YCSB-style workload and report fence counts.
    Bench {
        #[arg(long)]
        path: PathBuf,
        #[arg(long, default_value = "a")]
        workload: Workload,
        #[arg(long, default_value_t = 1000)]
        ops: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Commit each field write in its own transaction.
        #[arg(long)]
        baseline: bool,
        #[arg(long, default_value_t = 1)]
        writes_per_tx: usize,
        /// Records to load when the dataset is absent.
        #[arg(long, default_value_t = 1000)]
        records: u64,
    },
}

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, mult) = match s.chars().last().map(|c| c.to_ascii_uppercase()) {
        Some('K') => (&s[..s.len() - 1], 1u64 << 10),
        Some('M') => (&s[..s.len() - 1], 1 << 20),
        Some('G') => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.parse::<u64>()
        .ok()
        .and_then(|n| n.checked_mul(mult))
        .ok_or_else(|| format!("invalid size {s:?}"))
}

fn emit<T: Serialize + std::fmt::Debug>(json: bool, v: &T, text: impl FnOnce(&T) -> String) {
    let body = if json {
        serde_json::to_string_pretty(v).expect("report serializes")
    } else {
        text(v)
    };
    // A closed pipe (e.g. `| head`) is not an error worth a panic.
    let _ = writeln!(std::io::stdout(), "{body}");
}

fn run(cli: Cli) -> uniheap::Result<ExitCode> {
    let json = cli.json;
    match cli.cmd {
        Cmd::Create { path, size, name, force } => {
            let s = HeapSession::create(&path, size, &name, force)?;
            let regions = s.heap().regions();
            s.close()?;
            emit(json, &regions, |r| {
                let mut out = format!("created {} ({size} bytes)", path.display());
                for (n, reg) in uniheap::layout::REGION_NAMES.iter().zip(r.iter()) {
                    out += &format!("\n  {n:<6} offset {:>10} length {:>10}", reg.offset, reg.length);
                }
                out
            });
        }
        Cmd::Info { path } => {
            let info = heapctl::info(&path)?;
            emit(json, &info, |i| {
                let h = &i.header;
                let mut out = format!(
                    "heap {:?} v{} size {} epoch {} phase {:?}\nobjects {} live {} plasses {} roots {}\nlog {}/{} bytes",
                    h.heap_name,
                    h.version,
                    h.heap_size,
                    h.active_epoch,
                    h.gc_phase,
                    i.stats.object_count,
                    i.stats.live_count,
                    i.stats.plass_count,
                    i.stats.root_count,
                    i.stats.log_bytes_used,
                    i.stats.log_capacity
                );
                for p in &i.plasses {
                    let fields: Vec<String> = p.fields.iter().map(|f| format!("{}: {}", f.name, f.ty)).collect();
                    out += &format!("\n  plass {} {} {{{}}}", p.id, p.name, fields.join(", "));
                }
                for r in &i.roots {
                    out += &format!("\n  root {} -> {} ({})", r.name, r.object, r.plass.as_deref().unwrap_or("?"));
                }
                out
            });
        }
        Cmd::Verify { path } => {
            let report = heapctl::verify_file(&path)?;
            let clean = report.is_clean();
            emit(json, &report, |r| {
                if r.is_clean() {
                    format!("ok: no violations ({:?})", r.checked)
                } else {
                    r.violations
                        .iter()
                        .map(|v| format!("{} at {}: {}", v.code, v.location, v.detail))
                        .collect::<Vec<_>>()
                        .join("\n")
                }
            });
            return Ok(if clean { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Cmd::Gc { path } => {
            let s = HeapSession::open(&path, OpenMode::ReadWrite)?;
            let r = s.request_gc()?;
            s.close()?;
            emit(json, &r, |r| {
                format!(
                    "gc: live {} reclaimed {} log {} -> {} bytes, epoch {}, {} fences",
                    r.live, r.reclaimed, r.log_bytes_before, r.log_bytes_after, r.epoch, r.fences
                )
            });
        }
        Cmd::Bench {
            path,
            workload,
            ops,
            threads,
            seed,
            baseline,
            writes_per_tx,
            records,
        } => {
            let s = HeapSession::open(&path, OpenMode::ReadWrite)?;
            let cfg = BenchConfig {
                workload,
                ops,
                threads,
                seed,
                baseline,
                writes_per_tx,
                records,
            };
            let r = heapctl::run_bench(s.heap(), &cfg)?;
            s.close()?;
            emit(json, &r, |r| {
                format!(
                    "workload {:?}: {} ops, {} txs ({} conflicts), {} fences ({:.2}/tx), setup {} fences, {} ms\nbreakdown {:?}",
                    r.workload,
                    r.ops,
                    r.committed_txs,
                    r.conflicts,
                    r.fence_total,
                    r.fences_per_tx,
                    r.setup_fences,
                    r.elapsed_ms,
                    r.fence_breakdown
                )
            });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("heapctl: {e}");
            ExitCode::from(2)
        }
    }
}
