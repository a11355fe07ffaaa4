//! Scenario checks shared by the integration tests (small parameters) and the
//! acceptance runner (full parameters). Each returns a one-line summary on
//! success and a description of the first discrepancy on failure.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use rand::Rng;
use uniheap::heapctl::verify_image;
use uniheap::layout::Geometry;
use uniheap::log::EntryKind;
use uniheap::plass::fields;
use uniheap::types::{map_js_number, type_table};
use uniheap::{
    map_foreign_type, CommitResult, CrashPlan, Error, Forwarding, Heap, HeapOptions, Language, ObjectRef,
    SimulatedNvm, UniType, Value, VrootProvider,
};

use super::*;

pub type Check = Result<String, String>;

fn verify_clean(heap: &Heap, ctx: &str) -> Result<(), String> {
    let report = verify_image(&heap.device().persisted_image()).map_err(|e| format!("{ctx}: verify failed: {e}"))?;
    if report.is_clean() {
        Ok(())
    } else {
        Err(format!("{ctx}: verify found {:?}", report.violations))
    }
}

pub fn open_image(image: &[u8]) -> Heap {
    Heap::open(SimulatedNvm::from_image(image.to_vec()).expect("device")).expect("open")
}

/// A persisted heap with a few linked nodes and one root, plus its model.
pub fn crash_base(seed: u64) -> (Vec<u8>, Model, u32) {
    let mut r = rng(seed);
    let heap = Heap::create_in_memory("crash", 1 << 20).expect("heap");
    let plass = node_plass(&heap);
    let ids = heap
        .with_tx(|tx| {
            let ids: Vec<u64> = (0..4).map(|_| tx.alloc_obj(plass, None).map(|o| o.0)).collect::<uniheap::Result<_>>()?;
            for (k, &id) in ids.iter().enumerate() {
                tx.write_field(ObjectRef(id), 0, Value::Long(k as i64 + 1))?;
                tx.write_field(ObjectRef(id), 3, Value::Reference(ObjectRef(ids[(k + 1) % 4])))?;
            }
            Ok(ids)
        })
        .expect("setup tx");
    heap.write_field_atomic(ObjectRef(ids[0]), 2, Value::Double(r.gen()))
        .expect("atomic");
    heap.set_root("head", ObjectRef(ids[0])).expect("root");
    heap.close().expect("close");
    (heap.device().persisted_image(), observe(&heap), plass)
}

fn plan_name(p: &CrashPlan) -> String {
    match p {
        CrashPlan::Keep(l) => format!("keep{l:?}"),
        other => format!("{other:?}"),
    }
}

/// One injection: replays `ops` with a crash armed at fence `k`, recovers
/// under `plan`, and compares against the legal oracle states.
fn inject(image: &[u8], base: &Model, plass: u32, ops: &[Op], k: u64, plan: &CrashPlan) -> Result<(), String> {
    let dry = open_image(image);
    let (states, durable) = run_ops(&dry, plass, base, ops);
    let h = open_image(image);
    h.device().arm_crash_at_fence(k);
    let (states2, durable2) = run_ops(&h, plass, base, ops);
    if states2 != states || durable2 != durable {
        return Err("workload is not deterministic".into());
    }
    let rec = Heap::open(h.device().crash_with(plan).map_err(|e| e.to_string())?)
        .map_err(|e| format!("recovery failed at fence {k} ({}): {e}", plan_name(plan)))?;
    let got = observe(&rec);
    let legal = legal_states(&states, &durable, k);
    if !legal.iter().any(|m| **m == got) {
        return Err(format!(
            "crash at fence {k} ({}) recovered a state matching no durable prefix; ops {ops:?}",
            plan_name(plan)
        ));
    }
    verify_clean(&rec, &format!("after crash at fence {k}"))?;
    // The recovered heap stays usable.
    rec.with_tx(|tx| tx.alloc_obj(plass, None)).map_err(|e| format!("post-recovery tx: {e}"))?;
    Ok(())
}

/// Randomized crash injection over transactional workloads.
pub fn crash_injections(injections: usize, seed: u64) -> Check {
    let (image, base, plass) = crash_base(seed);
    let mut r = rng(seed ^ 0x5eed);
    let mut boundary = 0;
    for i in 0..injections {
        let count = r.gen_range(1..=8);
        let ops = random_ops(&mut r, count, 8, base.objects.len());
        let dry = open_image(&image);
        let start = dry.fence_count();
        let (_, durable) = run_ops(&dry, plass, &base, &ops);
        let end = *durable.last().expect("ops");
        let k = r.gen_range(start..=end + 1);
        let plan = match i % 3 {
            0 => CrashPlan::DropPending,
            1 => CrashPlan::KeepPending,
            _ => CrashPlan::Random(r.gen()),
        };
        if durable.contains(&k) {
            boundary += 1;
        }
        inject(&image, &base, plass, &ops, k, &plan).map_err(|e| format!("injection {i}: {e}"))?;
    }
    Ok(format!("{injections} injections, {boundary} at a durability fence, all matched the oracle"))
}

/// Every fence of a fixed three-transaction workload, with every subset of
/// the lines pending at that fence surviving.
pub fn crash_exhaustive() -> Check {
    let (image, base, plass) = crash_base(7);
    let ops = vec![
        Op::Tx {
            allocs: 1,
            writes: vec![(4, 0, Value::Long(10)), (0, 3, Value::Reference(ObjectRef(5))), (4, 1, Value::Int(-3))],
        },
        Op::Tx {
            allocs: 0,
            writes: vec![(1, 0, Value::Long(20)), (2, 2, Value::Double(2.5)), (4, 3, Value::Reference(ObjectRef(2)))],
        },
        Op::Tx {
            allocs: 2,
            writes: vec![(5, 0, Value::Long(30)), (6, 3, Value::Reference(ObjectRef(6))), (3, 0, Value::Long(40))],
        },
    ];
    let dry = open_image(&image);
    let start = dry.fence_count();
    let (_, durable) = run_ops(&dry, plass, &base, &ops);
    let end = *durable.last().unwrap();
    let mut cases = 0;
    for k in start..=end {
        let probe = open_image(&image);
        probe.device().arm_crash_at_fence(k);
        run_ops(&probe, plass, &base, &ops);
        let pending = probe.device().pending_lines();
        let subsets: Vec<Vec<usize>> = if pending.len() <= 10 {
            (0u32..1 << pending.len())
                .map(|mask| {
                    pending
                        .iter()
                        .enumerate()
                        .filter(|(b, _)| mask & (1 << b) != 0)
                        .map(|(_, &l)| l)
                        .collect()
                })
                .collect()
        } else {
            let mut v = vec![Vec::new(), pending.clone()];
            for skip in 0..pending.len() {
                v.push(pending.iter().copied().filter(|&l| l != pending[skip]).collect());
                v.push(vec![pending[skip]]);
            }
            v
        };
        for keep in subsets {
            inject(&image, &base, plass, &ops, k, &CrashPlan::Keep(keep))?;
            cases += 1;
        }
    }
    Ok(format!("{} fences, {cases} crash images, all matched the oracle", end - start + 1))
}

fn big_heap(capacity: u64) -> Heap {
    Heap::create_with(
        SimulatedNvm::in_memory(capacity).expect("device"),
        "gc",
        Geometry::for_capacity(capacity),
        false,
        HeapOptions {
            auto_gc: false,
            ..HeapOptions::default()
        },
    )
    .expect("heap")
}

struct Recorder {
    held: Mutex<Vec<ObjectRef>>,
    moved: Mutex<Option<Forwarding>>,
}

impl VrootProvider for Recorder {
    fn vroots(&self) -> Vec<ObjectRef> {
        self.held.lock().unwrap().clone()
    }

    fn relocated(&self, fwd: &Forwarding) {
        *self.moved.lock().unwrap() = Some(fwd.clone());
    }
}

struct Shared(Arc<Recorder>);

impl VrootProvider for Shared {
    fn vroots(&self) -> Vec<ObjectRef> {
        self.0.vroots()
    }

    fn relocated(&self, fwd: &Forwarding) {
        self.0.relocated(fwd)
    }
}

/// Builds a random object graph with `n` objects and `updates` field
/// writes; returns the root names bound.
fn random_graph(heap: &Heap, r: &mut rand_chacha::ChaCha8Rng, n: usize, updates: usize) -> Vec<u64> {
    let node = node_plass(heap);
    let pair = heap
        .init_plass("Pair", &fields([("a", UniType::Reference), ("b", UniType::Reference)]))
        .expect("plass");
    let mut ids = Vec::with_capacity(n);
    while ids.len() < n {
        let batch = (n - ids.len()).min(500);
        let fresh = heap
            .with_tx(|tx| {
                (0..batch)
                    .map(|k| tx.alloc_obj(if k % 3 == 0 { pair } else { node }, None).map(|o| o.0))
                    .collect::<uniheap::Result<Vec<_>>>()
            })
            .expect("alloc");
        ids.extend(fresh);
    }
    let pairs: BTreeSet<u64> = ids.iter().copied().filter(|&id| heap.object_plass(ObjectRef(id)).unwrap().id == pair).collect();
    let mut done = 0;
    while done < updates {
        let batch = (updates - done).min(200);
        let writes: Vec<(u64, u64, Value)> = (0..batch)
            .map(|_| {
                let id = ids[r.gen_range(0..ids.len())];
                if pairs.contains(&id) {
                    let t = ids[r.gen_range(0..ids.len())];
                    (id, r.gen_range(0..2), Value::Reference(ObjectRef(if r.gen_bool(0.1) { 0 } else { t })))
                } else {
                    let f = r.gen_range(0..4u64);
                    (id, f, random_value(r, NODE_TYPES[f as usize], &ids))
                }
            })
            .collect();
        if r.gen_bool(0.05) {
            for (id, f, v) in writes.iter().take(5) {
                heap.write_field_atomic(ObjectRef(*id), *f, *v).expect("atomic");
            }
        } else {
            heap.with_tx(|tx| {
                for (id, f, v) in &writes {
                    tx.write_field(ObjectRef(*id), *f, *v)?;
                }
                Ok(())
            })
            .expect("update");
        }
        done += batch;
    }
    for k in 0..r.gen_range(1..=6) {
        heap.set_root(&format!("r{k}"), ObjectRef(ids[r.gen_range(0..ids.len())]))
            .expect("root");
    }
    ids
}

fn log_uniform(r: &mut rand_chacha::ChaCha8Rng, max: usize) -> usize {
    let e = r.gen_range(0.0..(max as f64).ln());
    (e.exp() as usize).clamp(1, max)
}

/// Random heaps collected with roots and vroots; compares against a BFS
/// oracle over the pre-collection model.
pub fn gc_random_heaps(heaps: usize, max_objects: usize, max_updates: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let (mut total_live, mut total_reclaimed) = (0u64, 0u64);
    for h in 0..heaps {
        let (n, updates) = if h == 0 {
            (max_objects, max_updates)
        } else {
            (log_uniform(&mut r, max_objects), log_uniform(&mut r, max_updates))
        };
        let heap = big_heap(32 << 20);
        let ids = random_graph(&heap, &mut r, n, updates);
        let vroots: Vec<u64> = (0..r.gen_range(0..=3)).map(|_| ids[r.gen_range(0..ids.len())]).collect();
        let rec = Arc::new(Recorder {
            held: Mutex::new(vroots.iter().map(|&v| ObjectRef(v)).collect()),
            moved: Mutex::new(None),
        });
        let _reg = heap.register_runtime(Shared(rec.clone()));

        let pre = observe(&heap);
        let reach = pre.reachable(&vroots);
        let starts: Vec<u64> = pre.roots.values().copied().chain(vroots.iter().copied()).collect();
        let pre_canon = pre.canonical(&starts);

        let report = heap.request_gc().map_err(|e| format!("heap {h}: gc failed: {e}"))?;
        let post = observe(&heap);
        let fwd = rec.moved.lock().unwrap().clone().ok_or("relocated callback not called")?;
        let new_vroots: Vec<u64> = vroots
            .iter()
            .map(|&v| fwd.get(ObjectRef(v)).map(|o| o.0).ok_or(format!("heap {h}: vroot {v} not forwarded")))
            .collect::<Result<_, _>>()?;
        let post_starts: Vec<u64> = post.roots.values().copied().chain(new_vroots).collect();
        if post.canonical(&post_starts) != pre_canon {
            return Err(format!("heap {h}: post-gc graph differs from the reachable pre-gc graph"));
        }
        if post.objects.len() != reach.len() || report.live as usize != reach.len() {
            return Err(format!(
                "heap {h}: {} objects survive, oracle expects {}",
                post.objects.len(),
                reach.len()
            ));
        }
        if report.reclaimed as usize != pre.objects.len() - reach.len() {
            return Err(format!("heap {h}: reclaimed {} != {}", report.reclaimed, pre.objects.len() - reach.len()));
        }
        let live_fields: u64 = post
            .objects
            .values()
            .map(|o| o.fields.iter().filter(|v| v.to_bits() != 0).count() as u64)
            .sum();
        let bound = live_fields * 40 + post.objects.len() as u64 * 40;
        if report.log_bytes_after > bound {
            return Err(format!("heap {h}: log {} bytes after gc exceeds {bound}", report.log_bytes_after));
        }
        verify_clean(&heap, &format!("heap {h} after gc"))?;
        total_live += report.live;
        total_reclaimed += report.reclaimed;
    }
    Ok(format!("{heaps} heaps, {total_live} live, {total_reclaimed} reclaimed, all isomorphic"))
}

/// Crashes a collection of an `n`-object heap at every fence it issues.
pub fn gc_crash_every_fence(n: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let heap = big_heap(1 << 20);
    random_graph(&heap, &mut r, n, 4 * n);
    if heap.list_roots().is_empty() {
        let first = heap.objects()[0];
        heap.set_root("r0", first).map_err(|e| e.to_string())?;
    }
    heap.close().map_err(|e| e.to_string())?;
    let image = heap.device().persisted_image();
    let pre = observe(&heap);

    let reference = open_image(&image);
    let start = reference.fence_count();
    let report = reference.request_gc().map_err(|e| e.to_string())?;
    let post = observe(&reference);
    let want = post.canonical_from_roots();
    if pre.canonical_from_roots() != want {
        return Err("the collection itself changed the rooted graph".into());
    }
    let mut cases = 0;
    for k in start..start + report.fences {
        for plan in [CrashPlan::DropPending, CrashPlan::KeepPending, CrashPlan::Random(r.gen())] {
            let h = open_image(&image);
            h.device().arm_crash_at_fence(k);
            h.request_gc().map_err(|e| e.to_string())?;
            let crashed = h.device().crash_with(&plan).map_err(|e| e.to_string())?;
            let rec = Heap::open(crashed).map_err(|e| format!("fence {k}: recovery failed: {e}"))?;
            let got = observe(&rec);
            if got.canonical_from_roots() != want {
                return Err(format!("fence {k} ({}): rooted graph differs after recovery", plan_name(&plan)));
            }
            if got != post && !(k == start && got == pre) {
                return Err(format!("fence {k} ({}): recovered heap is neither pre- nor post-gc", plan_name(&plan)));
            }
            verify_clean(&rec, &format!("gc crash at fence {k}"))?;
            cases += 1;
        }
    }
    // Crash inside the redo performed by recovery, then recover again.
    let mut nested = 0;
    for k in start + 1..start + report.fences {
        let h = open_image(&image);
        h.device().arm_crash_at_fence(k);
        h.request_gc().map_err(|e| e.to_string())?;
        let first = h.device().crash_with(&CrashPlan::DropPending).map_err(|e| e.to_string())?;
        first.arm_crash_at_fence(first.fence_count() + r.gen_range(0..report.fences));
        let interrupted = match Heap::open(first) {
            Ok(h2) => h2,
            Err(e) => return Err(format!("nested {k}: {e}")),
        };
        let rec = Heap::open(
            interrupted
                .device()
                .crash_with(&CrashPlan::DropPending)
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| format!("nested {k}: second recovery failed: {e}"))?;
        if observe(&rec) != post {
            return Err(format!("nested crash after fence {k}: heap differs from post-gc"));
        }
        nested += 1;
    }
    Ok(format!("{} gc fences, {cases} crash images, {nested} nested crashes, all equal to post-gc", report.fences))
}

/// Lookup accounting over `reads` reads and a linear-scan oracle for
/// `queries` translations.
pub fn translation(reads: u64, queries: u64, seed: u64) -> Check {
    let mut r = rng(seed);
    let heap = big_heap(8 << 20);
    let ids = random_graph(&heap, &mut r, 300, 3000);
    let arr = heap.with_tx(|tx| tx.alloc_array(UniType::Int, 64)).map_err(|e| e.to_string())?;
    heap.with_tx(|tx| {
        for i in (0..64).step_by(3) {
            tx.write_field(arr, i, Value::Int(i as i32))?;
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    heap.set_root("keep-array", arr).map_err(|e| e.to_string())?;
    // Compact once so checkpoints mix with later updates.
    heap.request_gc().map_err(|e| e.to_string())?;
    let live = heap.objects();
    heap.with_tx(|tx| {
        for _ in 0..500 {
            let o = live[r.gen_range(0..live.len())];
            let n = tx.heap().field_count(o)?;
            let f = r.gen_range(0..n);
            let ty = tx.heap().object_plass(o)?;
            let t = if ty.is_array() { ty.fields[0].ty } else { ty.fields[f as usize].ty };
            if t != UniType::Reference {
                tx.write_field(o, f, random_value(&mut r, t, &ids))?;
            }
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let aborted = heap.atomic_begin().map_err(|e| e.to_string())?;
    drop(aborted);

    let before = heap.lookup_count();
    let mut done = 0;
    while done < reads {
        let o = live[r.gen_range(0..live.len())];
        let n = heap.field_count(o).map_err(|e| e.to_string())?;
        heap.read_field(o, r.gen_range(0..n)).map_err(|e| e.to_string())?;
        done += 1;
    }
    let lookups = heap.lookup_count() - before;
    if lookups != reads {
        return Err(format!("{reads} reads took {lookups} lookups"));
    }

    // Oracle: scan the whole log, keeping the newest committed value record
    // of every (object, field).
    let entries = heap.log_entries().map_err(|e| e.to_string())?;
    let committed: BTreeSet<u64> = entries
        .iter()
        .filter(|(_, e)| e.kind == EntryKind::Commit)
        .map(|(_, e)| e.tx_id)
        .collect();
    let mut latest: HashMap<(u64, u64), u64> = HashMap::new();
    for (off, e) in &entries {
        let visible = match e.kind {
            EntryKind::Update => committed.contains(&e.tx_id),
            EntryKind::AtomicUpdate | EntryKind::CheckpointVal => true,
            _ => false,
        };
        if visible {
            latest.insert((e.object_id, e.field_index as u64), *off);
        }
    }
    let mut nonzero = 0;
    for _ in 0..queries {
        let o = live[r.gen_range(0..live.len())];
        let n = heap.field_count(o).map_err(|e| e.to_string())?;
        let f = r.gen_range(0..n);
        let got = heap.translate(o, f).map_err(|e| e.to_string())?;
        let want = latest.get(&(o.0, f)).copied().unwrap_or(0);
        if got != want {
            return Err(format!("translate({o}, {f}) = {got}, linear scan says {want}"));
        }
        nonzero += u64::from(want != 0);
    }
    Ok(format!("{reads} reads = {lookups} lookups; {queries} translations agree ({nonzero} written)"))
}

/// Every cell of the host-type mapping table, present and absent.
pub fn type_table_fidelity() -> Check {
    use UniType::*;
    let expected: [(Language, &[(&str, UniType)]); 3] = [
        (
            Language::Java,
            &[
                ("boolean", Char),
                ("byte", Char),
                ("char", Short),
                ("int", Int),
                ("long", Long),
                ("float", Float),
                ("double", Double),
                ("reference", Reference),
                ("array", Reference),
            ],
        ),
        (
            Language::Python,
            &[
                ("int", Int),
                ("long", Long),
                ("float", Float),
                ("list", Reference),
                ("dict", Reference),
                ("tuple", Reference),
            ],
        ),
        (Language::JavaScript, &[("boolean", Char), ("num", Double), ("array", Reference)]),
    ];
    // Columns each language leaves empty.
    let absent: [(Language, &[UniType]); 3] = [
        (Language::Java, &[]),
        (Language::Python, &[Char, Short, Double]),
        (Language::JavaScript, &[Short]),
    ];
    let mut cells = 0;
    for (lang, rows) in expected {
        let got: BTreeSet<(&str, UniType)> = type_table(lang).iter().copied().collect();
        let want: BTreeSet<(&str, UniType)> = rows.iter().copied().collect();
        if got != want {
            return Err(format!("{} table {got:?} != {want:?}", lang.name()));
        }
        for &(name, t) in rows {
            match map_foreign_type(lang, name) {
                Ok(m) if m == t => cells += 1,
                other => return Err(format!("{} {name}: {other:?}, want {t}", lang.name())),
            }
        }
        for probe in ["string", "str", "bool", "complex", "object", "Number", "short"] {
            if rows.iter().any(|(n, _)| *n == probe) {
                continue;
            }
            if !matches!(map_foreign_type(lang, probe), Err(Error::UnmappedType { .. })) {
                return Err(format!("{} {probe} should be unmapped", lang.name()));
            }
        }
    }
    for (lang, cols) in absent {
        let mapped: BTreeSet<UniType> = type_table(lang).iter().map(|&(_, t)| t).collect();
        let mapped: BTreeSet<UniType> = if lang == Language::JavaScript {
            mapped.into_iter().chain([Int, Long, Float, Double]).collect()
        } else {
            mapped
        };
        for t in UniType::ALL {
            let want_absent = cols.contains(&t);
            if mapped.contains(&t) == want_absent {
                return Err(format!("{} column {t}: absent={want_absent} mismatch", lang.name()));
            }
            cells += 1;
        }
    }
    // JavaScript numbers fill four columns depending on the declared type.
    for t in UniType::ALL {
        let ok = map_js_number(Some(t)).is_ok();
        if ok != matches!(t, Int | Long | Float | Double) {
            return Err(format!("javascript num as {t}: {ok}"));
        }
        cells += 1;
    }
    Ok(format!("{cells} cells match"))
}

#[derive(Debug, Clone)]
struct Committed {
    reads: Vec<(u64, i64, i64)>,
    writes: Vec<(u64, i64)>,
    token: i64,
}

/// Concurrent transactions over shared objects; checks the committed
/// history for a serial order and every read for torn values.
pub fn stm_serializability(threads: usize, txs: usize, objects: usize, seed: u64) -> Check {
    let heap = Heap::create_in_memory("stm", 16 << 20).expect("heap");
    let cell = heap
        .init_plass(
            "Cell",
            &fields([("seq", UniType::Long), ("token", UniType::Long), ("check", UniType::Long)]),
        )
        .expect("plass");
    let ids: Vec<u64> = heap
        .with_tx(|tx| {
            (0..objects)
                .map(|_| {
                    let o = tx.alloc_obj(cell, None)?;
                    tx.write_field(o, 2, Value::Long(!0))?;
                    Ok(o.0)
                })
                .collect::<uniheap::Result<_>>()
        })
        .expect("setup");
    let torn = std::sync::atomic::AtomicU64::new(0);
    let conflicts = std::sync::atomic::AtomicU64::new(0);
    let barrier = std::sync::Barrier::new(threads);
    let histories: Vec<Vec<Committed>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let (heap, ids, torn, conflicts, barrier) = (heap.clone(), ids.clone(), &torn, &conflicts, &barrier);
                s.spawn(move || {
                    let mut r = rng(seed.wrapping_add(t as u64));
                    barrier.wait();
                    let mut out = Vec::new();
                    for i in 0..txs {
                        let token = ((t as i64 + 1) << 32) | (i as i64 + 1);
                        let mut chosen: Vec<u64> = (0..r.gen_range(1..=4)).map(|_| ids[r.gen_range(0..ids.len())]).collect();
                        chosen.sort_unstable();
                        chosen.dedup();
                        let writer = r.gen_bool(0.7);
                        // Widen the window between reads and commit so that
                        // transactions genuinely overlap.
                        let pause = r.gen_bool(0.5);
                        loop {
                            let mut tx = heap.atomic_begin().expect("begin");
                            let attempt = (|| -> uniheap::Result<Committed> {
                                let mut c = Committed {
                                    reads: Vec::new(),
                                    writes: Vec::new(),
                                    token,
                                };
                                for &o in &chosen {
                                    let o = ObjectRef(o);
                                    let seq = tx.read_field(o, 0)?.as_long().unwrap();
                                    let tok = tx.read_field(o, 1)?.as_long().unwrap();
                                    let chk = tx.read_field(o, 2)?.as_long().unwrap();
                                    if chk != !tok {
                                        torn.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                                    }
                                    c.reads.push((o.0, seq, tok));
                                    if pause {
                                        std::thread::yield_now();
                                    }
                                    if writer {
                                        tx.write_field(o, 0, Value::Long(seq + 1))?;
                                        tx.write_field(o, 1, Value::Long(token))?;
                                        tx.write_field(o, 2, Value::Long(!token))?;
                                        c.writes.push((o.0, seq + 1));
                                    }
                                }
                                Ok(c)
                            })();
                            match attempt {
                                Ok(c) => match tx.atomic_end().expect("commit") {
                                    CommitResult::Committed => {
                                        out.push(c);
                                        break;
                                    }
                                    CommitResult::ConflictRetry => {
                                        conflicts.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                                    }
                                },
                                Err(Error::Conflict) => {
                                    conflicts.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                                    tx.abort().expect("abort");
                                }
                                Err(e) => panic!("tx failed: {e}"),
                            }
                        }
                    }
                    out
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker")).collect()
    });
    let history: Vec<Committed> = histories.into_iter().flatten().collect();
    let torn = torn.into_inner();
    if torn > 0 {
        return Err(format!("{torn} torn reads"));
    }

    // Version order per object comes from the sequence numbers.
    let mut writer_of: HashMap<(u64, i64), usize> = HashMap::new();
    for (i, c) in history.iter().enumerate() {
        for &w in &c.writes {
            if writer_of.insert(w, i).is_some() {
                return Err(format!("two commits installed version {w:?}"));
            }
        }
    }
    let mut edges: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); history.len()];
    for (i, c) in history.iter().enumerate() {
        for &(o, seq, tok) in &c.reads {
            if seq > 0 {
                let w = *writer_of.get(&(o, seq)).ok_or(format!("read of unknown version {o}@{seq}"))?;
                if history[w].token != tok {
                    return Err(format!("version {o}@{seq} carries a foreign token"));
                }
                if w != i {
                    edges[w].insert(i);
                }
            }
            if let Some(&next) = writer_of.get(&(o, seq + 1)) {
                if next != i {
                    edges[i].insert(next);
                }
            }
        }
        for &(o, seq) in &c.writes {
            if seq > 1 {
                let prev = *writer_of.get(&(o, seq - 1)).ok_or(format!("gap before {o}@{seq}"))?;
                edges[prev].insert(i);
            }
        }
    }
    // Kahn's algorithm: a serial order exists iff the graph is acyclic.
    let mut indeg = vec![0usize; history.len()];
    for e in &edges {
        for &t in e {
            indeg[t] += 1;
        }
    }
    let mut q: VecDeque<usize> = (0..history.len()).filter(|&i| indeg[i] == 0).collect();
    let mut ordered = 0;
    while let Some(i) = q.pop_front() {
        ordered += 1;
        for &t in &edges[i] {
            indeg[t] -= 1;
            if indeg[t] == 0 {
                q.push_back(t);
            }
        }
    }
    if ordered != history.len() {
        return Err(format!("conflict graph has a cycle ({} of {} ordered)", ordered, history.len()));
    }
    let mut final_seq: BTreeMap<u64, i64> = BTreeMap::new();
    for c in &history {
        for &(o, s) in &c.writes {
            let e = final_seq.entry(o).or_default();
            *e = (*e).max(s);
        }
    }
    for &o in &ids {
        let seq = heap.read_field(ObjectRef(o), 0).unwrap().as_long().unwrap();
        if seq != final_seq.get(&o).copied().unwrap_or(0) {
            return Err(format!("object {o} ends at seq {seq}"));
        }
    }
    verify_clean(&heap, "after stm run")?;
    Ok(format!(
        "{} commits, {} conflicts retried, acyclic conflict graph, 0 torn reads",
        history.len(),
        conflicts.into_inner()
    ))
}
