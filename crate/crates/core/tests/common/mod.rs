//! Independent test oracles: a plain in-memory model of heap contents, an
//! observer that rebuilds the model through the public read API, and a
//! canonical graph serialization that ignores object ids.

#![allow(dead_code)]

pub mod checks;

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniheap::plass::fields;
use uniheap::{Heap, ObjectRef, UniType, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelObject {
    pub plass: String,
    pub fields: Vec<Value>,
}

/// What a heap holds, as seen by a client.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Model {
    pub objects: BTreeMap<u64, ModelObject>,
    pub roots: BTreeMap<String, u64>,
}

impl Model {
    pub fn write(&mut self, id: u64, index: u64, v: Value) {
        self.objects.get_mut(&id).expect("model object").fields[index as usize] = v;
    }

    pub fn alloc(&mut self, id: u64, plass: &str, types: &[UniType]) {
        let prev = self.objects.insert(
            id,
            ModelObject {
                plass: plass.to_string(),
                fields: types.iter().map(|t| t.zero()).collect(),
            },
        );
        assert!(prev.is_none(), "id {id} allocated twice");
    }

    fn refs(&self, id: u64) -> impl Iterator<Item = u64> + '_ {
        self.objects[&id].fields.iter().filter_map(|v| match v {
            Value::Reference(r) if !r.is_null() => Some(r.0),
            _ => None,
        })
    }

    /// Ids reachable from the roots and `extra`, by breadth-first search.
    pub fn reachable(&self, extra: &[u64]) -> Vec<u64> {
        let mut seen = BTreeMap::new();
        let mut q: VecDeque<u64> = self.roots.values().copied().chain(extra.iter().copied()).collect();
        while let Some(id) = q.pop_front() {
            if seen.insert(id, ()).is_some() {
                continue;
            }
            q.extend(self.refs(id));
        }
        seen.into_keys().collect()
    }

    /// Id-free description of the graph reachable from `starts`: objects are
    /// numbered in breadth-first discovery order and references are written
    /// as those numbers.
    pub fn canonical(&self, starts: &[u64]) -> Vec<String> {
        let mut label: HashMap<u64, usize> = HashMap::new();
        let mut order = Vec::new();
        let mut q: VecDeque<u64> = starts.iter().copied().collect();
        while let Some(id) = q.pop_front() {
            if label.contains_key(&id) {
                continue;
            }
            label.insert(id, order.len());
            order.push(id);
            q.extend(self.refs(id));
        }
        let mut out: Vec<String> = starts.iter().map(|s| format!("start {}", label[s])).collect();
        for id in order {
            let o = &self.objects[&id];
            let f: Vec<String> = o
                .fields
                .iter()
                .map(|v| match v {
                    Value::Reference(r) if !r.is_null() => format!("@{}", label[&r.0]),
                    other => format!("{other:?}"),
                })
                .collect();
            out.push(format!("{} {} [{}]", label[&id], o.plass, f.join(",")));
        }
        out
    }

    /// Canonical form starting from the roots in name order.
    pub fn canonical_from_roots(&self) -> Vec<String> {
        let starts: Vec<u64> = self.roots.values().copied().collect();
        let mut c = self.canonical(&starts);
        c.insert(0, format!("roots {:?}", self.roots.keys().collect::<Vec<_>>()));
        c
    }
}

/// Rebuilds the model from a heap using only public reads.
pub fn observe(heap: &Heap) -> Model {
    let mut m = Model::default();
    for r in heap.objects() {
        let p = heap.object_plass(r).expect("plass");
        let n = heap.field_count(r).expect("field count");
        let fields = (0..n).map(|i| heap.read_field(r, i).expect("read")).collect();
        m.objects.insert(r.0, ModelObject { plass: p.name, fields });
    }
    for (name, r) in heap.list_roots() {
        m.roots.insert(name, r.0);
    }
    m
}

pub const NODE_TYPES: [UniType; 4] = [UniType::Long, UniType::Int, UniType::Double, UniType::Reference];

/// A small class with one field of several widths plus a reference.
pub fn node_plass(heap: &Heap) -> u32 {
    heap.init_plass(
        "Node",
        &fields([
            ("l", UniType::Long),
            ("i", UniType::Int),
            ("d", UniType::Double),
            ("next", UniType::Reference),
        ]),
    )
    .expect("plass")
}

pub fn random_value(rng: &mut ChaCha8Rng, ty: UniType, ids: &[u64]) -> Value {
    match ty {
        UniType::Long => Value::Long(rng.gen()),
        UniType::Int => Value::Int(rng.gen()),
        UniType::Double => Value::Double(rng.gen_range(-1e6..1e6)),
        UniType::Reference => {
            if ids.is_empty() || rng.gen_bool(0.2) {
                Value::Reference(ObjectRef::NULL)
            } else {
                Value::Reference(ObjectRef(ids[rng.gen_range(0..ids.len())]))
            }
        }
        other => other.zero(),
    }
}

/// One step of a crash workload.
#[derive(Debug, Clone)]
pub enum Op {
    /// New objects plus field writes, committed together.
    Tx { allocs: usize, writes: Vec<(usize, u64, Value)> },
    /// A single-field update outside any transaction.
    Atomic { target: usize, index: u64, value: Value },
}

/// Generates `n` operations over a pool of existing objects. Object
/// positions index into the pool, which grows as transactions allocate.
/// Reference values are filled in at run time.
pub fn random_ops(rng: &mut ChaCha8Rng, n: usize, max_writes: usize, pool: usize) -> Vec<Op> {
    let mut pool = pool;
    let mut ops = Vec::new();
    for _ in 0..n {
        if pool > 0 && rng.gen_bool(0.15) {
            let index = rng.gen_range(0..3) as u64;
            let value = random_value(rng, NODE_TYPES[index as usize], &[]);
            ops.push(Op::Atomic {
                target: rng.gen_range(0..pool),
                index,
                value,
            });
            continue;
        }
        let allocs = if pool == 0 { rng.gen_range(1..=2) } else { rng.gen_range(0..=2) };
        let total = pool + allocs;
        let nw = rng.gen_range(1..=max_writes);
        let writes = (0..nw)
            .filter(|_| total > 0)
            .map(|_| {
                let index = rng.gen_range(0..4) as u64;
                let v = if index == 3 {
                    Value::Reference(ObjectRef(rng.gen_range(0..=total) as u64))
                } else {
                    random_value(rng, NODE_TYPES[index as usize], &[])
                };
                (rng.gen_range(0..total), index, v)
            })
            .collect();
        pool = total;
        ops.push(Op::Tx { allocs, writes });
    }
    ops
}

/// Runs `ops`, returning the model after each one and the fence index at
/// which each became durable.
pub fn run_ops(heap: &Heap, plass: u32, base: &Model, ops: &[Op]) -> (Vec<Model>, Vec<u64>) {
    let mut model = base.clone();
    let mut pool: Vec<u64> = base.objects.keys().copied().collect();
    let mut states = vec![model.clone()];
    let mut durable_at = Vec::new();
    for op in ops {
        let before = heap.fence_count();
        match op {
            Op::Tx { allocs, writes } => {
                let mut tx = heap.atomic_begin().expect("begin");
                let mut fresh = Vec::new();
                for _ in 0..*allocs {
                    fresh.push(tx.alloc_obj(plass, None).expect("alloc").0);
                }
                let ids: Vec<u64> = pool.iter().chain(fresh.iter()).copied().collect();
                for id in &fresh {
                    model.alloc(*id, "Node", &NODE_TYPES);
                }
                let mut resolved = Vec::new();
                for &(pos, index, v) in writes {
                    let v = match v {
                        // Position 0 means null; k means the (k-1)th pool entry.
                        Value::Reference(r) if r.0 > 0 => Value::Reference(ObjectRef(ids[(r.0 - 1) as usize])),
                        Value::Reference(_) => Value::Reference(ObjectRef::NULL),
                        other => other,
                    };
                    tx.write_field(ObjectRef(ids[pos]), index, v).expect("write");
                    resolved.push((ids[pos], index, v));
                }
                tx.atomic_end().expect("commit");
                for (id, index, v) in resolved {
                    model.write(id, index, v);
                }
                pool.extend(fresh);
            }
            Op::Atomic { target, index, value } => {
                let id = pool[*target];
                heap.write_field_atomic(ObjectRef(id), *index, *value).expect("atomic");
                model.write(id, *index, *value);
            }
        }
        let after = heap.fence_count();
        assert!(after > before, "every op fences");
        durable_at.push(after - 1);
        states.push(model.clone());
    }
    (states, durable_at)
}

/// The states a crash just before fence `k` may legally recover to.
pub fn legal_states<'a>(states: &'a [Model], durable_at: &[u64], k: u64) -> Vec<&'a Model> {
    let n = durable_at.iter().filter(|&&d| d < k).count();
    let mut legal = vec![&states[n]];
    if durable_at.get(n) == Some(&k) {
        legal.push(&states[n + 1]);
    }
    legal
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
