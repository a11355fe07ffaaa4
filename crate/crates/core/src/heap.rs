//! The heap handle: creation and opening, header allocation, the durable
//! root table, plass registration and statistics.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gc::Registry;
use crate::layout::*;
use crate::log::{LogEntry, Slot, VALUE_OFFSET};
use crate::object::{LookupCounter, ObjectRef, ObjectSlot};
use crate::plass::{self, FieldDef, Plass, PlassTable};
use crate::pmem::{FenceSite, SimulatedNvm};
use crate::recovery::{self, RecoveryReport};
use crate::types::{UniType, Value};

/// Tunables fixed at open time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeapOptions {
    /// Collect automatically once the active log segment passes
    /// `gc_threshold` occupancy.
    pub auto_gc: bool,
    pub gc_threshold: f64,
}

impl Default for HeapOptions {
    fn default() -> Self {
        HeapOptions {
            auto_gc: true,
            gc_threshold: 0.75,
        }
    }
}

/// A point-in-time summary of the heap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HeapStats {
    /// Header chunks handed out in this epoch (the bump index).
    pub object_count: u64,
    /// Objects with their valid bit set.
    pub live_count: u64,
    pub plass_count: u64,
    pub root_count: u64,
    pub log_bytes_used: u64,
    pub log_capacity: u64,
    pub fence_count: u64,
    pub active_epoch: u64,
}

/// Volatile state tied to one epoch's object space.
pub(crate) struct EpochState {
    pub epoch: u64,
    pub objects: Vec<Option<Arc<ObjectSlot>>>,
    /// STM lock words (bit 31 locked, low bits version), one per chunk.
    pub locks: Box<[AtomicU32]>,
}

impl EpochState {
    pub fn new(epoch: u64, chunks: u64) -> Self {
        EpochState {
            epoch,
            objects: vec![None; chunks as usize],
            locks: (0..chunks).map(|_| AtomicU32::new(0)).collect(),
        }
    }

    pub fn slot(&self, r: ObjectRef) -> Option<&Arc<ObjectSlot>> {
        let i = r.0.checked_sub(1)? as usize;
        self.objects.get(i)?.as_ref()
    }

    /// A committed object, or `DanglingReference`.
    pub fn committed(&self, r: ObjectRef) -> Result<&Arc<ObjectSlot>> {
        match self.slot(r) {
            Some(s) if s.is_committed() => Ok(s),
            _ => Err(Error::DanglingReference(r.0)),
        }
    }

    pub fn lock(&self, id: u64) -> &AtomicU32 {
        &self.locks[(id - 1) as usize]
    }
}

/// Bump allocator over header chunks with a free list for aborted ids.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub(crate) struct Allocator {
    pub next: u64,
    pub free: BTreeSet<u64>,
    pub capacity: u64,
}

impl Allocator {
    pub fn take(&mut self) -> Result<u64> {
        if let Some(id) = self.free.pop_first() {
            return Ok(id);
        }
        if self.next >= self.capacity {
            return Err(Error::ObjectSpaceFull);
        }
        self.next += 1;
        Ok(self.next)
    }

    pub fn give_back(&mut self, id: u64) {
        self.free.insert(id);
        while self.next > 0 && self.free.remove(&self.next) {
            self.next -= 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LogCursor {
    pub base: u64,
    pub end: u64,
    pub tail: u64,
}

impl LogCursor {
    pub fn used(&self) -> u64 {
        self.tail - self.base
    }

    pub fn capacity(&self) -> u64 {
        self.end - self.base
    }

    pub fn has_room(&self, entries: u64) -> bool {
        self.tail + entries * ENTRY_SIZE <= self.end
    }
}

pub(crate) type RootSlots = Vec<Option<(String, u64)>>;

static NEXT_HEAP_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct HeapInner {
    /// Process-unique id, used to track per-thread transactions.
    pub id: u64,
    pub dev: Arc<SimulatedNvm>,
    pub name: String,
    pub size: u64,
    pub regions: RegionTable,
    pub read_only: bool,
    pub options: HeapOptions,
    /// Stop-the-world gate: mutators share it, the collector takes it alone.
    pub gate: Arc<RwLock<()>>,
    pub state: RwLock<EpochState>,
    pub alloc: Mutex<Allocator>,
    pub log: Mutex<LogCursor>,
    pub next_tx_id: AtomicU64,
    pub plasses: RwLock<PlassTable>,
    pub plass_append: Mutex<()>,
    pub roots: Mutex<RootSlots>,
    pub lookups: LookupCounter,
    pub gc_running: AtomicBool,
    pub registry: Registry,
    pub last_recovery: Mutex<RecoveryReport>,
}

/// A handle to an open heap. Cheap to clone and shareable across threads.
#[derive(Clone)]
pub struct Heap {
    pub(crate) inner: Arc<HeapInner>,
}

impl std::fmt::Debug for Heap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Heap")
            .field("name", &self.inner.name)
            .field("size", &self.inner.size)
            .field("epoch", &self.epoch())
            .field("read_only", &self.inner.read_only)
            .finish()
    }
}

fn check_heap_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains('\0') {
        return Err(Error::InvalidName(name.to_string()));
    }
    if name.len() > HEAP_NAME_LEN - 1 {
        return Err(Error::NameTooLong {
            name: name.to_string(),
            max: HEAP_NAME_LEN - 1,
        });
    }
    Ok(())
}

pub(crate) fn check_root_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains('\0') {
        return Err(Error::InvalidName(name.to_string()));
    }
    if name.len() > ROOT_NAME_LEN - 1 {
        return Err(Error::NameTooLong {
            name: name.to_string(),
            max: ROOT_NAME_LEN - 1,
        });
    }
    Ok(())
}

impl Heap {
    /// Formats `dev` with the default geometry for its capacity.
    pub fn create(dev: SimulatedNvm, name: &str, force: bool) -> Result<Heap> {
        let geometry = Geometry::for_capacity(dev.capacity());
        Self::create_with(dev, name, geometry, force, HeapOptions::default())
    }

    /// A heap on a fresh in-memory device.
    pub fn create_in_memory(name: &str, capacity: u64) -> Result<Heap> {
        Self::create(SimulatedNvm::in_memory(capacity)?, name, false)
    }

    /// Formats `dev`. The magic is written and fenced last, so a crash
    /// anywhere before that leaves a device that does not open as a heap.
    pub fn create_with(
        dev: SimulatedNvm,
        name: &str,
        geometry: Geometry,
        force: bool,
        options: HeapOptions,
    ) -> Result<Heap> {
        check_heap_name(name)?;
        let capacity = dev.capacity();
        let needed = geometry.required_bytes();
        if needed > capacity || geometry.object_chunks == 0 || geometry.log_bytes < ENTRY_SIZE {
            return Err(Error::GeometryTooLarge { needed, capacity });
        }
        let mut magic = [0u8; 8];
        dev.read_persisted(0, &mut magic)?;
        if magic == MAGIC && !force {
            return Err(Error::AlreadyFormatted);
        }
        if magic != [0; 8] {
            dev.write(0, &[0; 8])?;
            dev.flush_range(0, 8)?;
            dev.fence_at(FenceSite::Header);
        }
        dev.zero_range(0, needed)?;
        let header = HeapHeader::new(name, capacity, &geometry);
        dev.write(0, &header.encode_body())?;
        dev.flush_range(0, needed)?;
        dev.fence_at(FenceSite::Header);
        dev.write(0, &MAGIC)?;
        dev.flush_range(0, 8)?;
        dev.fence_at(FenceSite::Header);
        Self::open_with(dev, false, options)
    }

    /// Opens a heap for reading and writing, running recovery.
    pub fn open(dev: SimulatedNvm) -> Result<Heap> {
        Self::open_with(dev, false, HeapOptions::default())
    }

    /// Opens a heap without ever issuing a write or fence. Recovery state is
    /// computed in memory only.
    pub fn open_read_only(dev: SimulatedNvm) -> Result<Heap> {
        Self::open_with(dev, true, HeapOptions::default())
    }

    pub fn open_with(dev: SimulatedNvm, read_only: bool, options: HeapOptions) -> Result<Heap> {
        let dev = Arc::new(dev);
        let header = read_header(&dev)?;
        let mut redo_gc = false;
        let mut cleanup_finished = false;
        if header.gc_phase != GcPhase::Idle {
            if header.active_epoch != header.gc_epoch {
                // The epoch flip is durable: only the idle marker is missing.
                if !read_only {
                    dev.atomic_write_u64(OFF_GC_PHASE, GcPhase::Idle as u64)?;
                    dev.flush_range(OFF_GC_PHASE, 8)?;
                    dev.fence_at(FenceSite::Recovery);
                    cleanup_finished = true;
                }
            } else {
                redo_gc = !read_only;
            }
        }
        let loaded = recovery::load(&dev, &header, !read_only)?;
        let mut report = loaded.report.clone();
        report.gc_cleanup_finished = cleanup_finished;
        let inner = HeapInner {
            id: NEXT_HEAP_ID.fetch_add(1, Ordering::Relaxed),
            dev,
            name: header.heap_name.clone(),
            size: header.heap_size,
            regions: header.regions,
            read_only,
            options,
            gate: Arc::new(RwLock::new(())),
            state: RwLock::new(loaded.state),
            alloc: Mutex::new(loaded.alloc),
            log: Mutex::new(loaded.log),
            next_tx_id: AtomicU64::new(loaded.next_tx_id),
            plasses: RwLock::new(loaded.plasses),
            plass_append: Mutex::new(()),
            roots: Mutex::new(loaded.roots),
            lookups: LookupCounter::default(),
            gc_running: AtomicBool::new(false),
            registry: Registry::default(),
            last_recovery: Mutex::new(RecoveryReport::default()),
        };
        let heap = Heap {
            inner: Arc::new(inner),
        };
        if redo_gc {
            heap.redo_gc()?;
            report.gc_redone = true;
        }
        *heap.inner.last_recovery.lock() = report;
        Ok(heap)
    }

    pub fn device(&self) -> &Arc<SimulatedNvm> {
        &self.inner.dev
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn heap_size(&self) -> u64 {
        self.inner.size
    }

    pub fn regions(&self) -> RegionTable {
        self.inner.regions
    }

    pub fn is_read_only(&self) -> bool {
        self.inner.read_only
    }

    pub fn epoch(&self) -> u64 {
        self.inner.state.read().epoch
    }

    /// What recovery did when this handle was opened.
    pub fn recovery_report(&self) -> RecoveryReport {
        self.inner.last_recovery.lock().clone()
    }

    /// The header as currently seen through the volatile view.
    pub fn header(&self) -> Result<HeapHeader> {
        read_header(&self.inner.dev)
    }

    pub(crate) fn check_writable(&self) -> Result<()> {
        if self.inner.read_only {
            Err(Error::ReadOnly)
        } else {
            Ok(())
        }
    }

    /// Device offset of an object's header chunk in the active space.
    pub fn chunk_offset(&self, r: ObjectRef) -> Result<u64> {
        let chunks = self.inner.regions.object_chunks();
        if r.0 == 0 || r.0 > chunks {
            return Err(Error::DanglingReference(r.0));
        }
        Ok(self.inner.regions.objects(self.epoch()).offset + (r.0 - 1) * CHUNK_SIZE)
    }

    /// Reserves a header chunk. The id becomes durable only through the
    /// ALLOC record of the transaction that uses it.
    pub(crate) fn alloc_header(&self) -> Result<ObjectRef> {
        let id = self.inner.alloc.lock().take()?;
        Ok(ObjectRef(id))
    }

    pub(crate) fn release_header(&self, r: ObjectRef) {
        self.inner.alloc.lock().give_back(r.0);
    }

    // ---- plasses ------------------------------------------------------

    /// Registers a plass, or returns the id of an identical existing one.
    pub fn init_plass(&self, name: &str, fields: &[FieldDef]) -> Result<u32> {
        plass::validate(name, fields, false)?;
        self.init_plass_unchecked(name, fields)
    }

    /// The synthetic plass for arrays of `element`.
    pub fn array_plass(&self, element: UniType) -> Result<u32> {
        let name = plass::array_plass_name(element);
        if let Some(id) = self.exists_plass(&name) {
            return Ok(id);
        }
        let fields = plass::fields([(plass::ARRAY_ELEMENT_FIELD, element)]);
        self.init_plass_unchecked(&name, &fields)
    }

    fn init_plass_unchecked(&self, name: &str, fields: &[FieldDef]) -> Result<u32> {
        let _append = self.inner.plass_append.lock();
        if let Some(id) = self.inner.plasses.read().lookup(name) {
            let existing = self.inner.plasses.read().get(id).cloned().unwrap();
            return if existing.same_layout(fields) {
                Ok(id)
            } else {
                Err(Error::SchemaMismatch(name.to_string()))
            };
        }
        self.check_writable()?;
        let record = plass::encode(name, fields);
        let region = self.inner.regions.plass();
        let used = self.inner.plasses.read().used;
        let len = record.len() as u64;
        if used + len > region.length {
            return Err(Error::PlassRegionFull);
        }
        let dev = &self.inner.dev;
        dev.write(region.offset + used, &record)?;
        dev.flush_range(region.offset + used, len)?;
        dev.fence_at(FenceSite::Plass);
        dev.atomic_write_u64(OFF_NEXT_PLASS_OFFSET, used + len)?;
        dev.flush_range(OFF_NEXT_PLASS_OFFSET, 8)?;
        dev.fence_at(FenceSite::Plass);
        Ok(self
            .inner
            .plasses
            .write()
            .push(name.to_string(), fields.to_vec(), len))
    }

    pub fn exists_plass(&self, name: &str) -> Option<u32> {
        self.inner.plasses.read().lookup(name)
    }

    pub fn plass(&self, id: u32) -> Option<Plass> {
        self.inner.plasses.read().get(id).map(|p| (**p).clone())
    }

    pub fn plasses(&self) -> Vec<Plass> {
        self.inner
            .plasses
            .read()
            .all()
            .into_iter()
            .map(|p| (*p).clone())
            .collect()
    }

    pub(crate) fn plass_arc(&self, id: u32) -> Result<Arc<Plass>> {
        self.inner
            .plasses
            .read()
            .get(id)
            .cloned()
            .ok_or(Error::UnknownPlass(id))
    }

    // ---- objects -------------------------------------------------------

    /// Plass of a committed object.
    pub fn object_plass(&self, r: ObjectRef) -> Result<Plass> {
        let _g = self.inner.gate.read_recursive();
        let st = self.inner.state.read();
        Ok((*st.committed(r)?.plass).clone())
    }

    /// Number of field slots (the element count for arrays).
    pub fn field_count(&self, r: ObjectRef) -> Result<u64> {
        let _g = self.inner.gate.read_recursive();
        let st = self.inner.state.read();
        Ok(st.committed(r)?.len())
    }

    /// All committed objects in id order.
    pub fn objects(&self) -> Vec<ObjectRef> {
        let _g = self.inner.gate.read_recursive();
        let st = self.inner.state.read();
        st.objects
            .iter()
            .enumerate()
            .filter(|(_, s)| s.as_ref().is_some_and(|s| s.is_committed()))
            .map(|(i, _)| ObjectRef(i as u64 + 1))
            .collect()
    }

    /// Reads a field outside any transaction: one table lookup, one log read,
    /// no fences.
    pub fn read_field(&self, r: ObjectRef, index: u64) -> Result<Value> {
        let _g = self.inner.gate.read_recursive();
        let st = self.inner.state.read();
        let slot = st.committed(r)?;
        let idx = slot.check_index(index)?;
        let off = slot.table.translate(index, &self.inner.lookups)?;
        self.load_value(slot.slot_type(idx), off)
    }

    /// Reads a field by name.
    pub fn read_field_named(&self, r: ObjectRef, field: &str) -> Result<Value> {
        let idx = self.object_plass(r)?.field_index(field)?;
        self.read_field(r, idx as u64)
    }

    pub(crate) fn load_value(&self, ty: UniType, off: u64) -> Result<Value> {
        if off == 0 {
            return Ok(ty.zero());
        }
        Ok(Value::from_bits(ty, self.inner.dev.read_u64(off + VALUE_OFFSET)?))
    }

    /// Log offset holding the newest committed value of a field (0 if never
    /// written). Counts as one lookup.
    pub fn translate(&self, r: ObjectRef, index: u64) -> Result<u64> {
        let _g = self.inner.gate.read_recursive();
        let st = self.inner.state.read();
        st.committed(r)?.table.translate(index, &self.inner.lookups)
    }

    /// Total field-table lookups so far.
    pub fn lookup_count(&self) -> u64 {
        self.inner.lookups.get()
    }

    /// Valid records in the active log segment, oldest first, with offsets.
    pub fn log_entries(&self) -> Result<Vec<(u64, LogEntry)>> {
        let cur = *self.inner.log.lock();
        let bytes = self.inner.dev.read_vec(cur.base, cur.used() as usize)?;
        Ok(bytes
            .chunks_exact(ENTRY_SIZE as usize)
            .enumerate()
            .filter_map(|(i, b)| match LogEntry::decode(b) {
                Slot::Valid(e) => Some((cur.base + i as u64 * ENTRY_SIZE, e)),
                _ => None,
            })
            .collect())
    }

    // ---- roots ---------------------------------------------------------

    /// Binds `name` to `r` durably (a null reference deletes the root).
    /// Costs one fence. Inside a transaction use `Transaction::set_root`.
    pub fn set_root(&self, name: &str, r: ObjectRef) -> Result<()> {
        check_root_name(name)?;
        if crate::tx::has_active_tx(self.inner.id) {
            return Err(Error::NestedTransaction);
        }
        self.check_writable()?;
        let _g = self.inner.gate.read_recursive();
        self.set_root_locked(name, r)
    }

    /// Caller holds the gate.
    pub(crate) fn set_root_locked(&self, name: &str, r: ObjectRef) -> Result<()> {
        let epoch = {
            let st = self.inner.state.read();
            if !r.is_null() {
                st.committed(r)?;
            }
            st.epoch
        };
        let mut roots = self.inner.roots.lock();
        let bank = self.inner.regions.root_bank(epoch);
        let existing = roots
            .iter()
            .position(|s| s.as_ref().is_some_and(|(n, _)| n == name));
        let dev = &self.inner.dev;
        let (slot, bytes) = match (existing, r.is_null()) {
            (None, true) => return Ok(()),
            (Some(i), true) => (i, [0u8; ROOT_SLOT_SIZE as usize]),
            (Some(i), false) => (i, encode_root_slot(name, r.0)),
            (None, false) => {
                let i = roots
                    .iter()
                    .position(Option::is_none)
                    .ok_or(Error::RootTableFull)?;
                (i, encode_root_slot(name, r.0))
            }
        };
        let off = bank.offset + slot as u64 * ROOT_SLOT_SIZE;
        if existing.is_some() && !r.is_null() {
            dev.atomic_write_u64(off + ROOT_NAME_LEN as u64, r.0)?;
        } else {
            // A slot never straddles a cache line, so name and address
            // persist together.
            dev.write(off, &bytes)?;
        }
        dev.flush_range(off, ROOT_SLOT_SIZE)?;
        dev.fence_at(FenceSite::Root);
        roots[slot] = (!r.is_null()).then(|| (name.to_string(), r.0));
        Ok(())
    }

    pub fn get_root(&self, name: &str) -> Option<ObjectRef> {
        self.inner
            .roots
            .lock()
            .iter()
            .flatten()
            .find(|(n, _)| n == name)
            .map(|&(_, a)| ObjectRef(a))
    }

    /// Every durable root in slot order.
    pub fn list_roots(&self) -> Vec<(String, ObjectRef)> {
        self.inner
            .roots
            .lock()
            .iter()
            .flatten()
            .map(|(n, a)| (n.clone(), ObjectRef(*a)))
            .collect()
    }

    // ---- accounting ----------------------------------------------------

    pub fn fence_count(&self) -> u64 {
        self.inner.dev.fence_count()
    }

    pub fn heap_stats(&self) -> HeapStats {
        let _g = self.inner.gate.read_recursive();
        let (live, epoch) = {
            let st = self.inner.state.read();
            let live = st
                .objects
                .iter()
                .flatten()
                .filter(|s| s.is_committed())
                .count() as u64;
            (live, st.epoch)
        };
        let log = *self.inner.log.lock();
        HeapStats {
            object_count: self.inner.alloc.lock().next,
            live_count: live,
            plass_count: self.inner.plasses.read().len() as u64,
            root_count: self.inner.roots.lock().iter().flatten().count() as u64,
            log_bytes_used: log.used(),
            log_capacity: log.capacity(),
            fence_count: self.fence_count(),
            active_epoch: epoch,
        }
    }

    /// Persists the volatile header deltas (bump index, log tail) and the
    /// valid bitmap. One fence, or none for a read-only heap.
    pub fn close(&self) -> Result<()> {
        if self.inner.read_only {
            return Ok(());
        }
        let _g = self.inner.gate.read_recursive();
        let dev = &self.inner.dev;
        let st = self.inner.state.read();
        let bitmap_region = self.inner.regions.bitmap(st.epoch);
        let bitmap = recovery::bitmap_bytes(&st, bitmap_region.length);
        dev.write(bitmap_region.offset, &bitmap)?;
        dev.flush_range(bitmap_region.offset, bitmap_region.length)?;
        let next = self.inner.alloc.lock().next;
        let tail = self.inner.log.lock().tail;
        dev.atomic_write_u64(OFF_NEXT_HEADER_INDEX, next)?;
        dev.atomic_write_u64(OFF_LOG_TAIL, tail)?;
        dev.flush_range(OFF_NEXT_HEADER_INDEX, 24)?;
        dev.fence_at(FenceSite::Header);
        Ok(())
    }

    /// Sets the bitmap bit for `id` in the active space (volatile only).
    pub(crate) fn set_bitmap_bit(&self, epoch: u64, id: u64, on: bool) -> Result<()> {
        let region = self.inner.regions.bitmap(epoch);
        let off = region.offset + (id - 1) / 8;
        let mut b = [0u8; 1];
        self.inner.dev.read(off, &mut b)?;
        let mask = 1u8 << ((id - 1) % 8);
        b[0] = if on { b[0] | mask } else { b[0] & !mask };
        self.inner.dev.write(off, &b)
    }
}

pub(crate) fn read_header(dev: &SimulatedNvm) -> Result<HeapHeader> {
    if dev.capacity() < HEADER_REGION {
        return Err(Error::NotAHeap);
    }
    let b = dev.read_vec(0, HEADER_LEN)?;
    HeapHeader::decode(&b, dev.capacity())
}
