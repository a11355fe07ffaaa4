//! Rebuilding volatile state from the media.
//!
//! The active log segment is scanned from its base until the first slot
//! that is not a valid record. ALLOC and UPDATE records count only when a
//! COMMIT with the same transaction id appears in the scanned prefix;
//! checkpoint and atomic records stand on their own. Replaying the prefix in
//! order rebuilds every field index table, the valid bitmap, the bump index
//! and the STM version words.
//!
//! A read-write open then repairs the media: bytes beyond the recovered tail
//! are zeroed (so a later append can never be mistaken for an older torn
//! record), the bitmap and lock words are rewritten, and the header's bump
//! index and log tail are refreshed. All repairs share one fence.

use std::collections::HashMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::heap::{Allocator, EpochState, Heap, LogCursor, RootSlots};
use crate::layout::*;
use crate::log::{EntryKind, LogEntry, Slot};
use crate::object::ObjectSlot;
use crate::plass::{self, PlassTable};
use crate::pmem::{FenceSite, SimulatedNvm};

/// What recovery found and did.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    /// Transactions whose COMMIT record was found.
    pub replayed_txs: u64,
    /// ALLOC/UPDATE records without a durable COMMIT.
    pub discarded_entries: u64,
    pub atomic_updates: u64,
    pub checkpoint_records: u64,
    /// The scan stopped at a non-zero slot that failed its checksum.
    pub torn_tail: bool,
    pub cleared_locks: u64,
    /// An interrupted collection was rerun from marking.
    pub gc_redone: bool,
    /// A collection had flipped the epoch; only its idle marker was missing.
    pub gc_cleanup_finished: bool,
    /// Media repairs were written (and fenced).
    pub repaired: bool,
}

pub(crate) struct Loaded {
    pub state: EpochState,
    pub alloc: Allocator,
    pub log: LogCursor,
    pub next_tx_id: u64,
    pub plasses: PlassTable,
    pub roots: RootSlots,
    pub report: RecoveryReport,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptHeap(msg.into())
}

pub(crate) fn load_plasses(dev: &SimulatedNvm, header: &HeapHeader) -> Result<PlassTable> {
    let region = header.regions.plass();
    let used = header.next_plass_offset;
    if used > region.length {
        return Err(Error::CorruptHeader(format!(
            "plass region use {used} exceeds its length {}",
            region.length
        )));
    }
    let bytes = dev.read_vec(region.offset, used as usize)?;
    let records = plass::decode_region(&bytes, used as usize).map_err(corrupt)?;
    Ok(PlassTable::from_records(records, used))
}

/// Result of scanning one log segment.
pub(crate) struct Scan {
    pub entries: Vec<(u64, LogEntry)>,
    pub tail: u64,
    pub torn: bool,
    /// End of the last non-zero byte at or beyond `tail`, if any.
    pub residue_end: Option<u64>,
}

pub(crate) fn scan_segment(bytes: &[u8], base: u64, capacity: u64) -> Scan {
    let mut entries = Vec::new();
    let mut pos = 0u64;
    let mut torn = false;
    while pos + ENTRY_SIZE <= capacity {
        match LogEntry::decode(&bytes[pos as usize..(pos + ENTRY_SIZE) as usize]) {
            Slot::Valid(e) => entries.push((base + pos, e)),
            Slot::Empty => break,
            Slot::Invalid => {
                torn = true;
                break;
            }
        }
        pos += ENTRY_SIZE;
    }
    let residue_end = bytes[pos as usize..]
        .iter()
        .rposition(|&b| b != 0)
        .map(|i| base + pos + i as u64 + 1);
    Scan {
        entries,
        tail: base + pos,
        torn,
        residue_end,
    }
}

pub(crate) fn bitmap_bytes(st: &EpochState, len: u64) -> Vec<u8> {
    let mut b = vec![0u8; len as usize];
    for (i, s) in st.objects.iter().enumerate() {
        if s.as_ref().is_some_and(|s| s.is_committed()) {
            b[i / 8] |= 1 << (i % 8);
        }
    }
    b
}

pub(crate) fn load(dev: &SimulatedNvm, header: &HeapHeader, write_back: bool) -> Result<Loaded> {
    let regions = header.regions;
    let epoch = header.active_epoch;
    let plasses = load_plasses(dev, header)?;
    let mut report = RecoveryReport::default();

    let seg = regions.log(epoch);
    let capacity = regions.log_capacity();
    let seg_bytes = dev.read_vec(seg.offset, seg.length as usize)?;
    let scan = scan_segment(&seg_bytes, seg.offset, capacity);
    report.torn_tail = scan.torn;

    let mut expected: HashMap<u64, u64> = HashMap::new();
    let mut counts: HashMap<u64, u64> = HashMap::new();
    let mut max_tx = 0u64;
    for (_, e) in &scan.entries {
        max_tx = max_tx.max(e.tx_id);
        match e.kind {
            EntryKind::Commit => {
                expected.insert(e.tx_id, e.value);
            }
            EntryKind::Update | EntryKind::Alloc => *counts.entry(e.tx_id).or_default() += 1,
            _ => {}
        }
    }
    for (tx, want) in &expected {
        let got = counts.get(tx).copied().unwrap_or(0);
        if got != *want {
            return Err(corrupt(format!(
                "transaction {tx} commits {want} records but {got} precede it"
            )));
        }
    }

    let chunks = regions.object_chunks();
    let space = regions.objects(epoch);
    let space_bytes = dev.read_vec(space.offset, space.length as usize)?;
    let chunk = |id: u64| {
        let o = ((id - 1) * CHUNK_SIZE) as usize;
        decode_object_header(&space_bytes[o..o + CHUNK_SIZE as usize])
    };
    let mut state = EpochState::new(epoch, chunks);

    for &(off, e) in &scan.entries {
        let committed = || expected.contains_key(&e.tx_id);
        match e.kind {
            EntryKind::Commit => report.replayed_txs += 1,
            EntryKind::Alloc | EntryKind::Update if !committed() => report.discarded_entries += 1,
            EntryKind::Alloc | EntryKind::CheckpointHdr => {
                let id = e.object_id;
                if id == 0 || id > chunks {
                    return Err(corrupt(format!("record at {off} names object {id} outside the space")));
                }
                if state.objects[(id - 1) as usize].is_some() {
                    return Err(corrupt(format!("object {id} allocated twice")));
                }
                let (chunk_plass, _, flags, _) = chunk(id);
                let plass_id = if e.kind == EntryKind::Alloc {
                    if chunk_plass != e.field_index {
                        return Err(corrupt(format!(
                            "object {id} header names plass {chunk_plass}, its ALLOC names {}",
                            e.field_index
                        )));
                    }
                    e.field_index
                } else {
                    chunk_plass
                };
                let p = plasses
                    .get(plass_id)
                    .cloned()
                    .ok_or_else(|| corrupt(format!("object {id} refers to unknown plass {plass_id}")))?;
                if p.is_array() != (flags & FLAG_ARRAY != 0) {
                    return Err(corrupt(format!("object {id} array flag disagrees with its plass")));
                }
                if !p.is_array() && e.value != 0 {
                    return Err(corrupt(format!("object {id} has a length but plass {plass_id} is not an array")));
                }
                let slot = ObjectSlot::new(p, e.value, true);
                if e.kind == EntryKind::CheckpointHdr {
                    report.checkpoint_records += 1;
                    if slot.len() != e.field_index as u64 {
                        return Err(corrupt(format!("object {id} checkpoint field count mismatch")));
                    }
                }
                state.objects[(id - 1) as usize] = Some(Arc::new(slot));
            }
            EntryKind::Update | EntryKind::CheckpointVal | EntryKind::AtomicUpdate => {
                let id = e.object_id;
                let slot = state
                    .objects
                    .get((id.wrapping_sub(1)) as usize)
                    .and_then(Option::as_ref)
                    .ok_or_else(|| corrupt(format!("record at {off} writes unallocated object {id}")))?;
                let idx = e.field_index as u64;
                if idx >= slot.len() {
                    return Err(corrupt(format!("record at {off} writes field {idx} of object {id} (len {})", slot.len())));
                }
                if slot.slot_type(idx as usize).tag() != e.type_tag {
                    return Err(corrupt(format!("record at {off} has the wrong type tag")));
                }
                slot.table.set(idx as usize, off);
                match e.kind {
                    EntryKind::AtomicUpdate => report.atomic_updates += 1,
                    EntryKind::CheckpointVal => report.checkpoint_records += 1,
                    _ => {}
                }
            }
        }
    }

    let mut cleared = Vec::new();
    for id in 1..=chunks {
        if state.objects[(id - 1) as usize].is_some() {
            let (_, word, _, _) = chunk(id);
            if word & LOCK_BIT != 0 {
                cleared.push(id);
            }
            state.lock(id).store(word & VERSION_MASK, Ordering::Relaxed);
        }
    }
    report.cleared_locks = cleared.len() as u64;

    let next = state
        .objects
        .iter()
        .rposition(Option::is_some)
        .map_or(0, |i| i as u64 + 1);
    let alloc = Allocator {
        next,
        free: (1..next)
            .filter(|&id| state.objects[(id - 1) as usize].is_none())
            .collect(),
        capacity: chunks,
    };

    let bank = regions.root_bank(epoch);
    let bank_bytes = dev.read_vec(bank.offset, bank.length as usize)?;
    let mut roots: RootSlots = Vec::with_capacity(regions.root_slots() as usize);
    for raw in bank_bytes.chunks_exact(ROOT_SLOT_SIZE as usize) {
        let slot = decode_root_slot(raw);
        if let Some((name, addr)) = &slot {
            if state.slot(crate::ObjectRef(*addr)).is_none() {
                return Err(corrupt(format!("root {name:?} refers to missing object {addr}")));
            }
        }
        roots.push(slot);
    }

    let log = LogCursor {
        base: seg.offset,
        end: seg.offset + capacity,
        tail: scan.tail,
    };

    if write_back {
        let mut wrote = false;
        if let Some(end) = scan.residue_end {
            dev.zero_range(scan.tail, end - scan.tail)?;
            dev.flush_range(scan.tail, end - scan.tail)?;
            wrote = true;
        }
        for id in 1..=chunks {
            let o = ((id - 1) * CHUNK_SIZE) as usize;
            let raw = &space_bytes[o..o + CHUNK_SIZE as usize];
            let off = space.offset + o as u64;
            if state.objects[(id - 1) as usize].is_none() {
                if raw.iter().any(|&b| b != 0) {
                    dev.zero_range(off, CHUNK_SIZE)?;
                    dev.flush_range(off, CHUNK_SIZE)?;
                    wrote = true;
                }
            } else if cleared.binary_search(&id).is_ok() {
                let (p, word, flags, _) = decode_object_header(raw);
                dev.write(off, &encode_object_header(p, word & VERSION_MASK, flags))?;
                dev.flush_range(off, CHUNK_SIZE)?;
                wrote = true;
            }
        }
        let bm_region = regions.bitmap(epoch);
        let bm = bitmap_bytes(&state, bm_region.length);
        if dev.read_vec(bm_region.offset, bm.len())? != bm {
            dev.write(bm_region.offset, &bm)?;
            dev.flush_range(bm_region.offset, bm_region.length)?;
            wrote = true;
        }
        if header.next_header_index != next || header.log_tail != scan.tail {
            dev.atomic_write_u64(OFF_NEXT_HEADER_INDEX, next)?;
            dev.atomic_write_u64(OFF_LOG_TAIL, scan.tail)?;
            dev.flush_range(OFF_NEXT_HEADER_INDEX, 24)?;
            wrote = true;
        }
        if wrote {
            dev.fence_at(FenceSite::Recovery);
        }
        report.repaired = wrote;
    }

    Ok(Loaded {
        state,
        alloc,
        log,
        next_tx_id: max_tx + 1,
        plasses,
        roots,
        report,
    })
}

/// A comparable dump of all volatile heap state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HeapSnapshot {
    pub epoch: u64,
    pub next_tx_id: u64,
    pub log_tail: u64,
    pub next_header_index: u64,
    pub free_ids: Vec<u64>,
    pub plass_bytes: u64,
    pub roots: Vec<Option<(String, u64)>>,
    pub objects: Vec<ObjectSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ObjectSnapshot {
    pub id: u64,
    pub plass_id: u32,
    pub array_length: u64,
    pub committed: bool,
    pub lock_word: u32,
    pub offsets: Vec<u64>,
}

impl Heap {
    /// Everything recovery rebuilds, for determinism checks.
    pub fn snapshot(&self) -> HeapSnapshot {
        let _g = self.inner.gate.read_recursive();
        let st = self.inner.state.read();
        let alloc = self.inner.alloc.lock().clone();
        let objects = st
            .objects
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                let s = s.as_ref()?;
                Some(ObjectSnapshot {
                    id: i as u64 + 1,
                    plass_id: s.plass.id,
                    array_length: s.array_length,
                    committed: s.is_committed(),
                    lock_word: st.locks[i].load(Ordering::Acquire),
                    offsets: s.table.snapshot(),
                })
            })
            .collect();
        HeapSnapshot {
            epoch: st.epoch,
            next_tx_id: self.inner.next_tx_id.load(Ordering::Acquire),
            log_tail: self.inner.log.lock().tail,
            next_header_index: alloc.next,
            free_ids: alloc.free.into_iter().collect(),
            plass_bytes: self.inner.plasses.read().used,
            roots: self.inner.roots.lock().clone(),
            objects,
        }
    }

    /// Re-reads the active epoch from the media (after a collection flipped it).
    pub(crate) fn reload(&self) -> Result<()> {
        let header = crate::heap::read_header(&self.inner.dev)?;
        let loaded = load(&self.inner.dev, &header, false)?;
        *self.inner.state.write() = loaded.state;
        *self.inner.alloc.lock() = loaded.alloc;
        *self.inner.log.lock() = loaded.log;
        *self.inner.roots.lock() = loaded.roots;
        let next = loaded.next_tx_id.max(self.inner.next_tx_id.load(Ordering::Acquire));
        self.inner.next_tx_id.store(next, Ordering::Release);
        Ok(())
    }
}
