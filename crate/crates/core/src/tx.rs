//! Transactions: versioned-lock STM combined with a redo-only durable commit.
//!
//! Writes are buffered in the transaction. At commit the lock words of every
//! written or allocated object are taken in id order, the read set is
//! validated, and then, under the log tail mutex, the ALLOC and UPDATE
//! records are appended and fenced, followed by a COMMIT record and a second
//! fence. Only then do the new values become visible through the field
//! index tables.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::Ordering;
use std::sync::Arc;

use parking_lot::lock_api::ArcRwLockReadGuard;
use parking_lot::RawRwLock;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::heap::{check_root_name, Heap};
use crate::layout::{encode_object_header, CHUNK_SIZE, ENTRY_SIZE, FLAG_ARRAY, LOCK_BIT, VERSION_MASK};
use crate::log::LogEntry;
use crate::object::{ObjectRef, ObjectSlot};
use crate::pmem::FenceSite;
use crate::types::{UniType, Value};

thread_local! {
    static ACTIVE: RefCell<Vec<u64>> = const { RefCell::new(Vec::new()) };
}

pub(crate) fn has_active_tx(heap_id: u64) -> bool {
    ACTIVE.with(|a| a.borrow().contains(&heap_id))
}

fn mark_active(heap_id: u64) {
    ACTIVE.with(|a| a.borrow_mut().push(heap_id));
}

fn mark_inactive(heap_id: u64) {
    ACTIVE.with(|a| a.borrow_mut().retain(|&h| h != heap_id));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TxState {
    Active,
    Committing,
    Committed,
    Aborted,
}

/// Outcome of [`Transaction::atomic_end`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitResult {
    Committed,
    /// Another transaction got in the way; nothing was written. Retry.
    ConflictRetry,
}

struct PendingAlloc {
    slot: Arc<ObjectSlot>,
    plass_id: u32,
}

/// An in-flight transaction. Dropping an active one aborts it.
///
/// A transaction is bound to the thread that began it.
pub struct Transaction {
    heap: Heap,
    tx_id: u64,
    state: TxState,
    read_set: BTreeMap<u64, u32>,
    write_set: BTreeMap<(u64, u32), Value>,
    allocs: BTreeMap<u64, PendingAlloc>,
    roots: Vec<(String, ObjectRef)>,
    gate: Option<ArcRwLockReadGuard<RawRwLock, ()>>,
}

impl std::fmt::Debug for Transaction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transaction")
            .field("tx_id", &self.tx_id)
            .field("state", &self.state)
            .field("reads", &self.read_set.len())
            .field("writes", &self.write_set.len())
            .field("allocs", &self.allocs.len())
            .finish()
    }
}

fn check_type(expected: UniType, v: &Value) -> Result<()> {
    if v.uni_type() == expected {
        Ok(())
    } else {
        Err(Error::TypeMismatch {
            expected: expected.name(),
            found: v.uni_type().name(),
        })
    }
}

impl Heap {
    /// Starts a failure-atomic region on this thread. Blocks while a
    /// collection is running. Issues no fences.
    pub fn atomic_begin(&self) -> Result<Transaction> {
        if has_active_tx(self.inner.id) {
            return Err(Error::NestedTransaction);
        }
        self.check_writable()?;
        let gate = self.inner.gate.read_arc();
        let tx_id = self.inner.next_tx_id.fetch_add(1, Ordering::AcqRel);
        mark_active(self.inner.id);
        Ok(Transaction {
            heap: self.clone(),
            tx_id,
            state: TxState::Active,
            read_set: BTreeMap::new(),
            write_set: BTreeMap::new(),
            allocs: BTreeMap::new(),
            roots: Vec::new(),
            gate: Some(gate),
        })
    }

    /// Runs `body` in a transaction, retrying on conflicts.
    pub fn with_tx<T>(&self, mut body: impl FnMut(&mut Transaction) -> Result<T>) -> Result<T> {
        loop {
            let mut tx = self.atomic_begin()?;
            match body(&mut tx) {
                Ok(v) => match tx.atomic_end()? {
                    CommitResult::Committed => return Ok(v),
                    CommitResult::ConflictRetry => continue,
                },
                Err(Error::Conflict) => {
                    tx.abort()?;
                    continue;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Updates one field outside a transaction with a single self-committing
    /// log record: exactly one fence.
    pub fn write_field_atomic(&self, r: ObjectRef, index: u64, value: Value) -> Result<()> {
        if has_active_tx(self.inner.id) {
            return Err(Error::NestedTransaction);
        }
        self.check_writable()?;
        {
            let _g = self.inner.gate.read_recursive();
            let st = self.inner.state.read();
            let slot = st.committed(r)?;
            let idx = slot.check_index(index)?;
            check_type(slot.slot_type(idx), &value)?;
            if let Value::Reference(target) = value {
                if !target.is_null() {
                    st.committed(target)?;
                }
            }
            let word = st.lock(r.0);
            let held = loop {
                let cur = word.load(Ordering::Acquire);
                if cur & LOCK_BIT == 0
                    && word
                        .compare_exchange_weak(cur, cur | LOCK_BIT, Ordering::AcqRel, Ordering::Relaxed)
                        .is_ok()
                {
                    break cur;
                }
                std::hint::spin_loop();
                std::thread::yield_now();
            };
            let written = (|| {
                let mut log = self.inner.log.lock();
                if !log.has_room(1) {
                    return Err(Error::LogFull);
                }
                let off = log.tail;
                let e = LogEntry::atomic_update(r.0, idx as u32, value.uni_type().tag(), value.to_bits());
                let dev = &self.inner.dev;
                dev.write(off, &e.encode())?;
                dev.flush_range(off, ENTRY_SIZE)?;
                dev.fence_at(FenceSite::AtomicUpdate);
                log.tail += ENTRY_SIZE;
                Ok(off)
            })();
            match written {
                Ok(off) => {
                    slot.table.set(idx, off);
                    word.store((held + 1) & VERSION_MASK, Ordering::Release);
                }
                Err(e) => {
                    word.store(held, Ordering::Release);
                    return Err(e);
                }
            }
        }
        self.maybe_auto_gc();
        Ok(())
    }

    pub(crate) fn maybe_auto_gc(&self) {
        let opts = self.inner.options;
        if !opts.auto_gc || self.inner.read_only || has_active_tx(self.inner.id) {
            return;
        }
        let log = *self.inner.log.lock();
        if (log.used() as f64) < opts.gc_threshold * log.capacity() as f64 {
            return;
        }
        // Best effort: another thread may already be collecting, and a full
        // inactive segment leaves the heap as it was.
        let _ = self.request_gc();
    }
}

impl Transaction {
    pub fn tx_id(&self) -> u64 {
        self.tx_id
    }

    pub fn state(&self) -> TxState {
        self.state
    }

    pub fn heap(&self) -> &Heap {
        &self.heap
    }

    fn check_active(&self) -> Result<()> {
        if self.state == TxState::Active {
            Ok(())
        } else {
            Err(Error::TxNotActive)
        }
    }

    /// Resolves `r` to an object this transaction may touch: its own fresh
    /// allocation or a committed object.
    fn with_slot<T>(&self, r: ObjectRef, f: impl FnOnce(&Arc<ObjectSlot>, bool) -> Result<T>) -> Result<T> {
        if let Some(p) = self.allocs.get(&r.0) {
            return f(&p.slot, true);
        }
        let st = self.heap.inner.state.read();
        let slot = st.committed(r)?;
        f(slot, false)
    }

    fn check_target(&self, v: &Value) -> Result<()> {
        match v {
            Value::Reference(t) if !t.is_null() => self.with_slot(*t, |_, _| Ok(())),
            _ => Ok(()),
        }
    }

    /// Allocates an object of `plass_id`. `array_length` is required for
    /// array plasses and forbidden otherwise.
    pub fn alloc_obj(&mut self, plass_id: u32, array_length: Option<u64>) -> Result<ObjectRef> {
        self.check_active()?;
        let p = self.heap.plass_arc(plass_id)?;
        let len = match (p.is_array(), array_length) {
            (true, Some(n)) => n,
            (false, None) => 0,
            (true, None) => {
                return Err(Error::InvalidPlass(format!("{} needs an array length", p.name)))
            }
            (false, Some(_)) => {
                return Err(Error::InvalidPlass(format!("{} is not an array plass", p.name)))
            }
        };
        if len > u32::MAX as u64 {
            return Err(Error::IndexOutOfRange {
                index: len,
                len: u32::MAX as u64,
            });
        }
        let r = self.heap.alloc_header()?;
        let slot = Arc::new(ObjectSlot::new(p.clone(), len, false));
        let epoch = {
            let mut st = self.heap.inner.state.write();
            st.objects[(r.0 - 1) as usize] = Some(slot.clone());
            st.epoch
        };
        let word = {
            let st = self.heap.inner.state.read();
            st.lock(r.0).load(Ordering::Acquire) & VERSION_MASK
        };
        let flags = if p.is_array() { FLAG_ARRAY } else { 0 };
        let off = self.heap.inner.regions.objects(epoch).offset + (r.0 - 1) * CHUNK_SIZE;
        self.heap
            .inner
            .dev
            .write(off, &encode_object_header(plass_id, word, flags))?;
        self.allocs.insert(r.0, PendingAlloc { slot, plass_id });
        Ok(r)
    }

    /// Allocates an array of `element` values.
    pub fn alloc_array(&mut self, element: UniType, length: u64) -> Result<ObjectRef> {
        self.check_active()?;
        let p = self.heap.array_plass(element)?;
        self.alloc_obj(p, Some(length))
    }

    /// Buffers a field write. Nothing reaches the device before commit.
    pub fn write_field(&mut self, r: ObjectRef, index: u64, value: Value) -> Result<()> {
        self.check_active()?;
        let idx = self.with_slot(r, |slot, _| {
            let idx = slot.check_index(index)?;
            check_type(slot.slot_type(idx), &value)?;
            Ok(idx)
        })?;
        self.check_target(&value)?;
        self.write_set.insert((r.0, idx as u32), value);
        Ok(())
    }

    pub fn write_field_named(&mut self, r: ObjectRef, field: &str, value: Value) -> Result<()> {
        let idx = self.with_slot(r, |slot, _| Ok(slot.plass.field_index(field)?))?;
        self.write_field(r, idx as u64, value)
    }

    /// Reads a field, seeing this transaction's own writes. Returns
    /// `Conflict` when a concurrent commit makes the read inconsistent; the
    /// caller should abort and retry.
    pub fn read_field(&mut self, r: ObjectRef, index: u64) -> Result<Value> {
        self.check_active()?;
        let heap = self.heap.clone();
        let (idx, own) = self.with_slot(r, |slot, own| Ok((slot.check_index(index)?, own)))?;
        if let Some(v) = self.write_set.get(&(r.0, idx as u32)) {
            return Ok(*v);
        }
        if own {
            let st = self.allocs.get(&r.0).unwrap();
            st.slot.table.translate(index, &heap.inner.lookups)?;
            return Ok(st.slot.slot_type(idx).zero());
        }
        let st = heap.inner.state.read();
        let slot = st.committed(r)?;
        let word = st.lock(r.0);
        let before = word.load(Ordering::Acquire);
        if before & LOCK_BIT != 0 {
            return Err(Error::Conflict);
        }
        let off = slot.table.translate(index, &heap.inner.lookups)?;
        let value = heap.load_value(slot.slot_type(idx), off)?;
        if word.load(Ordering::Acquire) != before {
            return Err(Error::Conflict);
        }
        match self.read_set.get(&r.0) {
            Some(&v) if v != before => return Err(Error::Conflict),
            _ => {
                self.read_set.insert(r.0, before);
            }
        }
        Ok(value)
    }

    pub fn read_field_named(&mut self, r: ObjectRef, field: &str) -> Result<Value> {
        let idx = self.with_slot(r, |slot, _| Ok(slot.plass.field_index(field)?))?;
        self.read_field(r, idx as u64)
    }

    /// Binds a durable root once this transaction commits.
    pub fn set_root(&mut self, name: &str, r: ObjectRef) -> Result<()> {
        self.check_active()?;
        check_root_name(name)?;
        if !r.is_null() {
            self.with_slot(r, |_, _| Ok(()))?;
        }
        self.roots.push((name.to_string(), r));
        Ok(())
    }

    /// Discards the transaction. Reserved header chunks return to the free
    /// list. No fences.
    pub fn abort(mut self) -> Result<()> {
        self.check_active()?;
        self.rollback();
        Ok(())
    }

    fn rollback(&mut self) {
        let heap = self.heap.clone();
        let allocs = std::mem::take(&mut self.allocs);
        if !allocs.is_empty() {
            let epoch = {
                let mut st = heap.inner.state.write();
                for id in allocs.keys() {
                    st.objects[(id - 1) as usize] = None;
                }
                st.epoch
            };
            let base = heap.inner.regions.objects(epoch).offset;
            for id in allocs.keys() {
                let _ = heap.inner.dev.write(base + (id - 1) * CHUNK_SIZE, &[0; CHUNK_SIZE as usize]);
                heap.release_header(ObjectRef(*id));
            }
        }
        self.write_set.clear();
        self.read_set.clear();
        self.roots.clear();
        self.finish(TxState::Aborted);
    }

    fn finish(&mut self, state: TxState) {
        self.state = state;
        self.gate = None;
        mark_inactive(self.heap.inner.id);
    }

    /// Commits. Exactly two fences when anything was written or allocated,
    /// none for an empty transaction (deferred roots add one fence each).
    pub fn atomic_end(mut self) -> Result<CommitResult> {
        self.check_active()?;
        self.state = TxState::Committing;
        let result = self.commit_inner();
        match result {
            Ok(CommitResult::Committed) => {
                let roots = std::mem::take(&mut self.roots);
                let mut root_result = Ok(());
                for (name, r) in roots {
                    if let Err(e) = self.heap.set_root_locked(&name, r) {
                        root_result = Err(e);
                        break;
                    }
                }
                self.finish(TxState::Committed);
                root_result?;
                self.heap.maybe_auto_gc();
                Ok(CommitResult::Committed)
            }
            Ok(CommitResult::ConflictRetry) => {
                self.rollback();
                Ok(CommitResult::ConflictRetry)
            }
            Err(e) => {
                self.rollback();
                Err(e)
            }
        }
    }

    fn commit_inner(&mut self) -> Result<CommitResult> {
        let heap = self.heap.clone();
        let inner = &heap.inner;
        let st = inner.state.read();
        if self.write_set.is_empty() && self.allocs.is_empty() {
            // Read-only: every version read must still be current, so that
            // the reads form a snapshot as of the last one. No fences.
            let stale = self.read_set.iter().any(|(&id, &seen)| st.lock(id).load(Ordering::Acquire) != seen);
            return Ok(if stale {
                CommitResult::ConflictRetry
            } else {
                CommitResult::Committed
            });
        }

        let lock_ids: BTreeSet<u64> = self
            .write_set
            .keys()
            .map(|&(o, _)| o)
            .chain(self.allocs.keys().copied())
            .collect();
        let mut held: Vec<(u64, u32)> = Vec::with_capacity(lock_ids.len());
        let release = |held: &[(u64, u32)]| {
            for &(id, v) in held {
                st.lock(id).store(v, Ordering::Release);
            }
        };
        for &id in &lock_ids {
            let w = st.lock(id);
            let cur = w.load(Ordering::Acquire);
            if cur & LOCK_BIT != 0
                || w
                    .compare_exchange(cur, cur | LOCK_BIT, Ordering::AcqRel, Ordering::Relaxed)
                    .is_err()
            {
                release(&held);
                return Ok(CommitResult::ConflictRetry);
            }
            held.push((id, cur));
        }
        for (&id, &seen) in &self.read_set {
            let now = match held.iter().find(|(h, _)| *h == id) {
                Some(&(_, v)) => v,
                None => st.lock(id).load(Ordering::Acquire),
            };
            if now != seen {
                release(&held);
                return Ok(CommitResult::ConflictRetry);
            }
        }

        let mut entries: Vec<LogEntry> = self
            .allocs
            .iter()
            .map(|(&id, a)| LogEntry::alloc(self.tx_id, id, a.plass_id, a.slot.array_length))
            .collect();
        entries.extend(self.write_set.iter().map(|(&(o, f), v)| {
            LogEntry::update(self.tx_id, o, f, v.uni_type().tag(), v.to_bits())
        }));
        let n = entries.len() as u64;
        let dev = &inner.dev;
        let start = {
            let mut log = inner.log.lock();
            if !log.has_room(n + 1) {
                release(&held);
                return Err(Error::LogFull);
            }
            let start = log.tail;
            let mut buf = Vec::with_capacity((n * ENTRY_SIZE) as usize);
            for e in &entries {
                buf.extend_from_slice(&e.encode());
            }
            let durable = (|| -> Result<()> {
                dev.write(start, &buf)?;
                dev.flush_range(start, n * ENTRY_SIZE)?;
                let space = inner.regions.objects(st.epoch).offset;
                for id in self.allocs.keys() {
                    dev.flush_range(space + (id - 1) * CHUNK_SIZE, CHUNK_SIZE)?;
                }
                dev.fence_at(FenceSite::TxEntries);
                let commit_off = start + n * ENTRY_SIZE;
                dev.write(commit_off, &LogEntry::commit(self.tx_id, n).encode())?;
                dev.flush_range(commit_off, ENTRY_SIZE)?;
                dev.fence_at(FenceSite::TxCommit);
                Ok(())
            })();
            if let Err(e) = durable {
                release(&held);
                return Err(e);
            }
            log.tail = start + (n + 1) * ENTRY_SIZE;
            for id in self.allocs.keys() {
                heap.set_bitmap_bit(st.epoch, *id, true)?;
            }
            start
        };

        for a in self.allocs.values() {
            a.slot.committed.store(true, Ordering::Release);
        }
        let n_allocs = self.allocs.len() as u64;
        for (k, (&(o, f), _)) in self.write_set.iter().enumerate() {
            let off = start + (n_allocs + k as u64) * ENTRY_SIZE;
            let slot = match self.allocs.get(&o) {
                Some(a) => &a.slot,
                None => st.slot(ObjectRef(o)).expect("locked object vanished"),
            };
            slot.table.set(f as usize, off);
        }
        for &(id, v) in &held {
            st.lock(id).store((v + 1) & VERSION_MASK, Ordering::Release);
        }
        drop(st);
        // Committed allocations are now owned by the heap.
        self.allocs.clear();
        Ok(CommitResult::Committed)
    }
}

impl Drop for Transaction {
    fn drop(&mut self) {
        if matches!(self.state, TxState::Active | TxState::Committing) {
            self.rollback();
        }
    }
}
