//! YCSB-style workload driver with fence accounting.
//!
//! The dataset is a `kv {key: long, value: long}` plass indexed by a
//! reference array; a `bench_meta` object (root `bench`) holds the record
//! count and the index. Loading the dataset is reported separately from the
//! measured run.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::heap::Heap;
use crate::object::ObjectRef;
use crate::plass::fields;
use crate::tx::{CommitResult, Transaction};
use crate::types::{UniType, Value};

pub const ROOT: &str = "bench";
const LOAD_BATCH: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Workload {
    /// 50% reads, 50% updates.
    A,
    /// 95% reads, 5% updates.
    B,
    /// Reads only.
    C,
    /// 95% reads skewed to recent inserts, 5% inserts.
    D,
    /// 50% reads, 50% read-modify-writes.
    F,
}

impl FromStr for Workload {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Workload::A),
            "b" => Ok(Workload::B),
            "c" => Ok(Workload::C),
            "d" => Ok(Workload::D),
            "f" => Ok(Workload::F),
            other => Err(format!("unknown workload {other:?} (expected a, b, c, d or f)")),
        }
    }
}

impl Workload {
    fn write_share(self) -> f64 {
        match self {
            Workload::A | Workload::F => 0.5,
            Workload::B | Workload::D => 0.05,
            Workload::C => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub workload: Workload,
    pub ops: u64,
    pub threads: usize,
    pub seed: u64,
    /// Commit every field write as its own transaction.
    pub baseline: bool,
    /// Field writes per update transaction.
    pub writes_per_tx: usize,
    /// Records loaded when the dataset does not exist yet.
    pub records: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            workload: Workload::A,
            ops: 1000,
            threads: 1,
            seed: 42,
            baseline: false,
            writes_per_tx: 1,
            records: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub workload: Workload,
    pub ops: u64,
    pub threads: usize,
    pub seed: u64,
    pub baseline: bool,
    pub writes_per_tx: usize,
    pub records: u64,
    /// Fences spent loading the dataset (zero when it already existed).
    pub setup_fences: u64,
    /// Fences issued during the measured run.
    pub fence_total: u64,
    pub committed_txs: u64,
    pub conflicts: u64,
    pub fences_per_tx: f64,
    pub reads: u64,
    pub writes: u64,
    pub inserts: u64,
    pub elapsed_ms: u64,
    pub fence_breakdown: BTreeMap<String, u64>,
}

#[derive(Clone, Copy)]
struct Dataset {
    meta: ObjectRef,
    index: ObjectRef,
    capacity: u64,
}

fn long(v: Value) -> Result<i64> {
    v.as_long().ok_or(Error::TypeMismatch {
        expected: "long",
        found: v.uni_type().name(),
    })
}

fn reference(v: Value) -> Result<ObjectRef> {
    v.as_reference().ok_or(Error::TypeMismatch {
        expected: "reference",
        found: v.uni_type().name(),
    })
}

fn ensure_dataset(heap: &Heap, records: u64, capacity: u64) -> Result<Dataset> {
    if let Some(meta) = heap.get_root(ROOT) {
        let index = reference(heap.read_field(meta, 1)?)?;
        let ds = Dataset {
            meta,
            index,
            capacity: heap.field_count(index)?,
        };
        let count = long(heap.read_field(meta, 0)?)? as u64;
        let want = count + capacity.saturating_sub(records);
        return if want > ds.capacity { grow_index(heap, ds, count, want) } else { Ok(ds) };
    }
    let kv = heap.init_plass("kv", &fields([("key", UniType::Long), ("value", UniType::Long)]))?;
    let meta_p = heap.init_plass(
        "bench_meta",
        &fields([("count", UniType::Long), ("index", UniType::Reference)]),
    )?;
    let (meta, index) = heap.with_tx(|tx| {
        let index = tx.alloc_array(UniType::Reference, capacity)?;
        let meta = tx.alloc_obj(meta_p, None)?;
        tx.write_field(meta, 1, Value::Reference(index))?;
        Ok((meta, index))
    })?;
    let mut loaded = 0;
    while loaded < records {
        let n = LOAD_BATCH.min(records - loaded);
        heap.with_tx(|tx| {
            for k in loaded..loaded + n {
                let o = tx.alloc_obj(kv, None)?;
                tx.write_field(o, 0, Value::Long(k as i64))?;
                tx.write_field(o, 1, Value::Long(k as i64))?;
                tx.write_field(index, k, Value::Reference(o))?;
            }
            tx.write_field(meta, 0, Value::Long((loaded + n) as i64))?;
            Ok(())
        })?;
        loaded += n;
    }
    heap.set_root(ROOT, meta)?;
    Ok(Dataset {
        meta,
        index,
        capacity,
    })
}

/// Copies the index into a larger array so inserts have room.
fn grow_index(heap: &Heap, ds: Dataset, count: u64, capacity: u64) -> Result<Dataset> {
    let index = heap.with_tx(|tx| tx.alloc_array(UniType::Reference, capacity))?;
    let mut copied = 0;
    while copied < count {
        let n = (4 * LOAD_BATCH).min(count - copied);
        heap.with_tx(|tx| {
            for k in copied..copied + n {
                let r = tx.read_field(ds.index, k)?;
                tx.write_field(index, k, r)?;
            }
            Ok(())
        })?;
        copied += n;
    }
    heap.with_tx(|tx| tx.write_field(ds.meta, 1, Value::Reference(index)))?;
    Ok(Dataset {
        meta: ds.meta,
        index,
        capacity,
    })
}

#[derive(Default)]
struct Counters {
    committed: AtomicU64,
    conflicts: AtomicU64,
    reads: AtomicU64,
    writes: AtomicU64,
    inserts: AtomicU64,
}

/// Runs `body` in a fresh transaction until it commits; counts the outcome.
fn run_tx(heap: &Heap, c: &Counters, mut body: impl FnMut(&mut Transaction) -> Result<()>) -> Result<()> {
    loop {
        let mut tx = heap.atomic_begin()?;
        match body(&mut tx) {
            Ok(()) => match tx.atomic_end()? {
                CommitResult::Committed => {
                    c.committed.fetch_add(1, Ordering::Relaxed);
                    return Ok(());
                }
                CommitResult::ConflictRetry => {
                    c.conflicts.fetch_add(1, Ordering::Relaxed);
                }
            },
            Err(Error::Conflict) => {
                c.conflicts.fetch_add(1, Ordering::Relaxed);
                tx.abort()?;
            }
            Err(e) => return Err(e),
        }
    }
}

fn record_count(heap: &Heap, ds: &Dataset) -> Result<u64> {
    Ok(long(heap.read_field(ds.meta, 0)?)? as u64)
}

fn worker(heap: &Heap, ds: Dataset, cfg: &BenchConfig, ops: u64, seed: u64, c: &Counters) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let share = cfg.workload.write_share();
    for _ in 0..ops {
        let count = record_count(heap, &ds)?;
        if count == 0 {
            return Err(Error::NotFound("bench dataset is empty".into()));
        }
        let write = rng.gen_bool(share);
        if !write {
            let key = if cfg.workload == Workload::D {
                let z = Zipf::new(count, 0.99).expect("count is positive");
                count - z.sample(&mut rng) as u64
            } else {
                rng.gen_range(0..count)
            };
            let o = reference(heap.read_field(ds.index, key)?)?;
            long(heap.read_field(o, 1)?)?;
            c.reads.fetch_add(1, Ordering::Relaxed);
            continue;
        }
        match cfg.workload {
            Workload::D => {
                let kv = heap.exists_plass("kv").ok_or(Error::NotFound("kv".into()))?;
                let v: i64 = rng.gen();
                let mut inserted = false;
                run_tx(heap, c, |tx| {
                    let n = long(tx.read_field(ds.meta, 0)?)? as u64;
                    inserted = n < ds.capacity;
                    if !inserted {
                        return Ok(());
                    }
                    let o = tx.alloc_obj(kv, None)?;
                    tx.write_field(o, 0, Value::Long(n as i64))?;
                    tx.write_field(o, 1, Value::Long(v))?;
                    tx.write_field(ds.index, n, Value::Reference(o))?;
                    tx.write_field(ds.meta, 0, Value::Long(n as i64 + 1))
                })?;
                c.inserts.fetch_add(u64::from(inserted), Ordering::Relaxed);
            }
            _ => {
                let rmw = cfg.workload == Workload::F;
                let picks: Vec<(u64, i64)> = (0..cfg.writes_per_tx)
                    .map(|_| (rng.gen_range(0..count), rng.gen()))
                    .collect();
                let apply = |tx: &mut Transaction, key: u64, v: i64| -> Result<()> {
                    let o = reference(tx.read_field(ds.index, key)?)?;
                    let new = if rmw {
                        long(tx.read_field(o, 1)?)?.wrapping_add(1)
                    } else {
                        v
                    };
                    tx.write_field(o, 1, Value::Long(new))
                };
                if cfg.baseline {
                    for &(key, v) in &picks {
                        run_tx(heap, c, |tx| apply(tx, key, v))?;
                    }
                } else {
                    run_tx(heap, c, |tx| {
                        for &(key, v) in &picks {
                            apply(tx, key, v)?;
                        }
                        Ok(())
                    })?;
                }
                c.writes.fetch_add(picks.len() as u64, Ordering::Relaxed);
            }
        }
    }
    Ok(())
}

/// Loads the dataset if needed, then runs the configured mix.
pub fn run_bench(heap: &Heap, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.threads == 0 || cfg.writes_per_tx == 0 {
        return Err(Error::InvalidName("threads and writes-per-tx must be positive".into()));
    }
    let f0 = heap.fence_count();
    let ds = if cfg.workload == Workload::C && heap.is_read_only() {
        let meta = heap
            .get_root(ROOT)
            .ok_or_else(|| Error::NotFound("bench dataset (run a writing workload first)".into()))?;
        let index = reference(heap.read_field(meta, 1)?)?;
        Dataset {
            meta,
            index,
            capacity: heap.field_count(index)?,
        }
    } else {
        let capacity = cfg.records + if cfg.workload == Workload::D { cfg.ops } else { 0 };
        ensure_dataset(heap, cfg.records, capacity.max(1))?
    };
    let f1 = heap.fence_count();
    let before: BTreeMap<String, u64> = breakdown(heap);
    let counters = Counters::default();
    let started = Instant::now();
    std::thread::scope(|s| -> Result<()> {
        let per = cfg.ops / cfg.threads as u64;
        let extra = cfg.ops % cfg.threads as u64;
        let handles: Vec<_> = (0..cfg.threads)
            .map(|t| {
                let ops = per + u64::from((t as u64) < extra);
                let seed = cfg.seed.wrapping_add(t as u64);
                let counters = &counters;
                s.spawn(move || worker(heap, ds, cfg, ops, seed, counters))
            })
            .collect();
        for h in handles {
            h.join().expect("bench worker panicked")?;
        }
        Ok(())
    })?;
    let elapsed = started.elapsed();
    let fence_total = heap.fence_count() - f1;
    let committed = counters.committed.load(Ordering::Relaxed);
    let after = breakdown(heap);
    Ok(BenchReport {
        workload: cfg.workload,
        ops: cfg.ops,
        threads: cfg.threads,
        seed: cfg.seed,
        baseline: cfg.baseline,
        writes_per_tx: cfg.writes_per_tx,
        records: record_count(heap, &ds)?,
        setup_fences: f1 - f0,
        fence_total,
        committed_txs: committed,
        conflicts: counters.conflicts.load(Ordering::Relaxed),
        fences_per_tx: if committed == 0 {
            0.0
        } else {
            fence_total as f64 / committed as f64
        },
        reads: counters.reads.load(Ordering::Relaxed),
        writes: counters.writes.load(Ordering::Relaxed),
        inserts: counters.inserts.load(Ordering::Relaxed),
        elapsed_ms: elapsed.as_millis() as u64,
        fence_breakdown: after
            .into_iter()
            .map(|(k, v)| {
                let d = v - before.get(&k).copied().unwrap_or(0);
                (k, d)
            })
            .filter(|(_, v)| *v > 0)
            .collect(),
    })
}

fn breakdown(heap: &Heap) -> BTreeMap<String, u64> {
    heap.device()
        .fence_breakdown()
        .into_iter()
        .map(|(site, n)| {
            let name = serde_json::to_value(site)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_else(|| format!("{site:?}"));
            (name, n)
        })
        .collect()
}
