//! Stop-the-world mark-and-compact collection.
//!
//! The collector takes the heap gate exclusively, so no transaction is in
//! flight. It marks from the active root bank plus the vroots reported by
//! registered runtimes, assigns surviving objects new ids `1..=live` in old-id
//! order, and rebuilds them in the inactive object space and log segment:
//! one fresh header chunk per object, one CHECKPOINT_HDR record, and one
//! CHECKPOINT_VAL record holding the newest value of every non-zero field.
//! Forwarded roots go to the inactive root bank. Flipping `active_epoch` is
//! the single commit point.
//!
//! Every phase change is persisted before the phase acts. A crash before the
//! flip leaves the old epoch intact and recovery reruns the collection; a
//! crash after it only needs the idle marker written.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::heap::Heap;
use crate::layout::*;
use crate::log::{LogEntry, VALUE_OFFSET};
use crate::object::ObjectRef;
use crate::pmem::FenceSite;
use crate::types::UniType;

/// Supplies the references a runtime holds outside the heap.
pub trait VrootProvider: Send + Sync {
    fn vroots(&self) -> Vec<ObjectRef>;

    /// Called after a collection so the runtime can rewrite its references.
    fn relocated(&self, _forwarding: &Forwarding) {}
}

impl<F> VrootProvider for F
where
    F: Fn() -> Vec<ObjectRef> + Send + Sync,
{
    fn vroots(&self) -> Vec<ObjectRef> {
        self()
    }
}

#[derive(Default)]
pub(crate) struct Registry {
    next_id: AtomicU64,
    runtimes: Mutex<Vec<(u64, Arc<dyn VrootProvider>)>>,
}

impl Registry {
    fn providers(&self) -> Vec<Arc<dyn VrootProvider>> {
        self.runtimes.lock().iter().map(|(_, p)| p.clone()).collect()
    }
}

/// Registration of a runtime with the collector. Dropping it unregisters.
pub struct RuntimeHandle {
    id: u64,
    heap: std::sync::Weak<crate::heap::HeapInner>,
}

impl RuntimeHandle {
    pub fn runtime_id(&self) -> u64 {
        self.id
    }
}

impl Drop for RuntimeHandle {
    fn drop(&mut self) {
        if let Some(inner) = self.heap.upgrade() {
            inner.registry.runtimes.lock().retain(|(id, _)| *id != self.id);
        }
    }
}

impl std::fmt::Debug for RuntimeHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RuntimeHandle").field("id", &self.id).finish()
    }
}

/// Old id to new id, defined exactly for the survivors.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Forwarding {
    map: Vec<u64>,
}

impl Forwarding {
    /// Sliding assignment: marked ids get `1..=n` in ascending order.
    pub fn from_marks(marks: &[bool]) -> Forwarding {
        let mut next = 0;
        let map = marks
            .iter()
            .map(|&m| {
                if m {
                    next += 1;
                    next
                } else {
                    0
                }
            })
            .collect();
        Forwarding { map }
    }

    pub fn get(&self, old: ObjectRef) -> Option<ObjectRef> {
        let i = old.0.checked_sub(1)? as usize;
        match self.map.get(i) {
            Some(&n) if n != 0 => Some(ObjectRef(n)),
            _ => None,
        }
    }

    /// Forwards a reference value; null stays null.
    fn bits(&self, old: u64) -> u64 {
        if old == 0 {
            0
        } else {
            self.get(ObjectRef(old)).map_or(0, |r| r.0)
        }
    }

    pub fn live(&self) -> u64 {
        self.map.iter().filter(|&&n| n != 0).count() as u64
    }

    pub fn pairs(&self) -> impl Iterator<Item = (ObjectRef, ObjectRef)> + '_ {
        self.map
            .iter()
            .enumerate()
            .filter(|(_, &n)| n != 0)
            .map(|(i, &n)| (ObjectRef(i as u64 + 1), ObjectRef(n)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GcReport {
    pub live: u64,
    pub reclaimed: u64,
    pub log_bytes_before: u64,
    pub log_bytes_after: u64,
    pub marked: u64,
    pub relocated: u64,
    pub bytes_coalesced: u64,
    /// Epoch active after the collection.
    pub epoch: u64,
    pub fences: u64,
}

impl Heap {
    /// Registers a runtime whose vroots keep objects alive across collections.
    pub fn register_runtime(&self, provider: impl VrootProvider + 'static) -> RuntimeHandle {
        let reg = &self.inner.registry;
        let id = reg.next_id.fetch_add(1, Ordering::Relaxed) + 1;
        reg.runtimes.lock().push((id, Arc::new(provider)));
        RuntimeHandle {
            id,
            heap: Arc::downgrade(&self.inner),
        }
    }

    /// Runs a full collection at a safepoint: waits for in-flight
    /// transactions, blocks new ones, and resumes them afterwards.
    pub fn request_gc(&self) -> Result<GcReport> {
        self.check_writable()?;
        if crate::tx::has_active_tx(self.inner.id) {
            return Err(Error::NestedTransaction);
        }
        if self.inner.gc_running.swap(true, Ordering::AcqRel) {
            return Err(Error::GcAlreadyRunning);
        }
        let result: Result<_> = (|| {
            let _world = self.inner.gate.write();
            let providers = self.inner.registry.providers();
            let vroots: Vec<ObjectRef> = providers.iter().flat_map(|p| p.vroots()).collect();
            let (report, fwd) = self.collect(&vroots)?;
            Ok((report, fwd, providers))
        })();
        self.inner.gc_running.store(false, Ordering::Release);
        let (report, fwd, providers) = result?;
        for p in providers {
            p.relocated(&fwd);
        }
        Ok(report)
    }

    /// Reruns an interrupted collection during open. Runtimes are not
    /// attached yet, so only durable roots keep objects alive.
    pub(crate) fn redo_gc(&self) -> Result<GcReport> {
        self.inner.gc_running.store(true, Ordering::Release);
        let r = {
            let _world = self.inner.gate.write();
            self.collect(&[])
        };
        self.inner.gc_running.store(false, Ordering::Release);
        r.map(|(report, _)| report)
    }

    fn set_phase(&self, phase: GcPhase) -> Result<()> {
        let dev = &self.inner.dev;
        dev.atomic_write_u64(OFF_GC_PHASE, phase as u64)?;
        dev.flush_range(OFF_GC_PHASE, 8)?;
        dev.fence_at(FenceSite::Gc);
        Ok(())
    }

    /// Marks everything reachable from the durable roots and `vroots`.
    /// Reads only; running it twice yields the same bits.
    pub fn mark(&self, vroots: &[ObjectRef]) -> Result<Vec<bool>> {
        let st = self.inner.state.read();
        let mut marks = vec![false; st.objects.len()];
        let mut queue = VecDeque::new();
        for &v in vroots {
            st.committed(v).map_err(|_| Error::InvalidVroot(v.0))?;
            queue.push_back(v.0);
        }
        for (_, a) in self.inner.roots.lock().iter().flatten() {
            queue.push_back(*a);
        }
        while let Some(id) = queue.pop_front() {
            let i = (id - 1) as usize;
            if marks[i] {
                continue;
            }
            marks[i] = true;
            let slot = st.committed(ObjectRef(id))?;
            let refs = slot.plass.is_array() && slot.plass.fields[0].ty == UniType::Reference
                || slot.plass.fields.iter().any(|f| f.ty == UniType::Reference);
            if !refs {
                continue;
            }
            for idx in 0..slot.len() as usize {
                if slot.slot_type(idx) != UniType::Reference {
                    continue;
                }
                let off = slot.table.get(idx);
                if off == 0 {
                    continue;
                }
                let target = self.inner.dev.read_u64(off + VALUE_OFFSET)?;
                if target != 0 {
                    st.committed(ObjectRef(target))
                        .map_err(|_| Error::CorruptHeap(format!("object {id} field {idx} dangles")))?;
                    if !marks[(target - 1) as usize] {
                        queue.push_back(target);
                    }
                }
            }
        }
        Ok(marks)
    }

    /// The collection proper. Caller holds the gate exclusively.
    fn collect(&self, vroots: &[ObjectRef]) -> Result<(GcReport, Forwarding)> {
        let inner = &self.inner;
        let dev = &inner.dev;
        let regions = inner.regions;
        let fences_before = dev.fence_count();
        let epoch = inner.state.read().epoch;
        let next_epoch = epoch + 1;
        let log_before = inner.log.lock().used();
        let committed_before = inner
            .state
            .read()
            .objects
            .iter()
            .flatten()
            .filter(|s| s.is_committed())
            .count() as u64;

        {
            let st = inner.state.read();
            for &v in vroots {
                st.committed(v).map_err(|_| Error::InvalidVroot(v.0))?;
            }
        }

        dev.atomic_write_u64(OFF_GC_EPOCH, epoch)?;
        dev.atomic_write_u64(OFF_GC_PHASE, GcPhase::Marking as u64)?;
        dev.flush_range(OFF_GC_PHASE, OFF_GC_EPOCH + 8 - OFF_GC_PHASE)?;
        dev.fence_at(FenceSite::Gc);
        let marks = match self.mark(vroots) {
            Ok(m) => m,
            Err(e) => {
                self.set_phase(GcPhase::Idle)?;
                return Err(e);
            }
        };

        self.set_phase(GcPhase::Relocation)?;
        let fwd = Forwarding::from_marks(&marks);
        let live = fwd.live();

        self.set_phase(GcPhase::Compaction)?;
        let new_space = regions.objects(next_epoch);
        let new_log = regions.log(next_epoch);
        let new_bitmap = regions.bitmap(next_epoch);
        let new_bank = regions.root_bank(next_epoch);
        for r in [new_space, new_log, new_bitmap, new_bank] {
            dev.zero_range(r.offset, r.length)?;
        }

        let mut headers = vec![0u8; (live * CHUNK_SIZE) as usize];
        let mut log_bytes: Vec<u8> = Vec::new();
        {
            let st = inner.state.read();
            for (old, new) in fwd.pairs() {
                let slot = st.slot(old).expect("marked object has a slot");
                let word = st.lock(old.0).load(Ordering::Acquire) & VERSION_MASK;
                let flags = if slot.plass.is_array() { FLAG_ARRAY } else { 0 };
                let h = ((new.0 - 1) * CHUNK_SIZE) as usize;
                headers[h..h + CHUNK_SIZE as usize]
                    .copy_from_slice(&encode_object_header(slot.plass.id, word, flags));
                log_bytes.extend_from_slice(
                    &LogEntry::checkpoint_hdr(new.0, slot.len() as u32, slot.array_length).encode(),
                );
                for idx in 0..slot.len() as usize {
                    let off = slot.table.get(idx);
                    if off == 0 {
                        continue;
                    }
                    let ty = slot.slot_type(idx);
                    let mut bits = dev.read_u64(off + VALUE_OFFSET)?;
                    if ty == UniType::Reference {
                        bits = fwd.bits(bits);
                    }
                    if bits != 0 {
                        log_bytes.extend_from_slice(
                            &LogEntry::checkpoint_val(new.0, idx as u32, ty.tag(), bits).encode(),
                        );
                    }
                }
            }
        }
        if log_bytes.len() as u64 > regions.log_capacity() {
            self.set_phase(GcPhase::Idle)?;
            return Err(Error::LogFull);
        }
        let mut bitmap = vec![0u8; new_bitmap.length as usize];
        for i in 0..live as usize {
            bitmap[i / 8] |= 1 << (i % 8);
        }
        dev.write(new_space.offset, &headers)?;
        dev.write(new_log.offset, &log_bytes)?;
        dev.write(new_bitmap.offset, &bitmap)?;
        for r in [new_space, new_log, new_bitmap, new_bank] {
            dev.flush_range(r.offset, r.length)?;
        }
        dev.fence_at(FenceSite::Gc);

        self.set_phase(GcPhase::Cleanup)?;
        let roots = inner.roots.lock().clone();
        for (i, slot) in roots.iter().enumerate() {
            if let Some((name, addr)) = slot {
                let new = fwd.bits(*addr);
                let off = new_bank.offset + i as u64 * ROOT_SLOT_SIZE;
                dev.write(off, &encode_root_slot(name, new))?;
            }
        }
        dev.flush_range(new_bank.offset, new_bank.length)?;
        dev.fence_at(FenceSite::Gc);

        dev.atomic_write_u64(OFF_ACTIVE_EPOCH, next_epoch)?;
        dev.flush_range(OFF_ACTIVE_EPOCH, 8)?;
        dev.fence_at(FenceSite::Gc);

        let new_tail = new_log.offset + log_bytes.len() as u64;
        dev.atomic_write_u64(OFF_GC_PHASE, GcPhase::Idle as u64)?;
        dev.atomic_write_u64(OFF_NEXT_HEADER_INDEX, live)?;
        dev.atomic_write_u64(OFF_LOG_TAIL, new_tail)?;
        dev.flush_range(OFF_GC_PHASE, 32)?;
        dev.fence_at(FenceSite::Gc);

        self.reload()?;

        let log_after = log_bytes.len() as u64;
        Ok((
            GcReport {
                live,
                reclaimed: committed_before - live,
                log_bytes_before: log_before,
                log_bytes_after: log_after,
                marked: live,
                relocated: fwd.pairs().filter(|(o, n)| o != n).count() as u64,
                bytes_coalesced: log_before.saturating_sub(log_after),
                epoch: next_epoch,
                fences: dev.fence_count() - fences_before,
            },
            fwd,
        ))
    }
}
