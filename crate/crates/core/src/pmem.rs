//! Simulated byte-addressable non-volatile memory.
//!
//! The device keeps two images: the *volatile* view that loads and stores
//! observe, and the *persisted* view that survives a crash. Stores land in
//! the volatile view and mark their 64-byte cache lines dirty.
//! [`SimulatedNvm::flush_range`] captures dirty lines into a pending set (the
//! clwb analog) and [`SimulatedNvm::fence`] makes every pending line durable
//! (the sfence analog).
//!
//! A crash keeps the persisted view plus an arbitrary subset of the pending
//! lines; dirty lines that were never flushed are always lost. The subset is
//! chosen by a [`CrashPlan`]. Tests can also arm a trap that freezes the
//! persisted view just before a given fence executes, which is how crash
//! points are enumerated.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Read;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Cache line size in bytes.
pub const LINE_SIZE: usize = 64;

/// Environment variable that seeds the random crash subset.
pub const CRASH_SEED_ENV: &str = "UNIHEAP_CRASH_SEED";

const DEFAULT_CRASH_SEED: u64 = 0x5eed_u64;

const DIRTY: u8 = 1;

type Line = Box<[u8; LINE_SIZE]>;

/// Call sites that issue fences, for the per-site breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FenceSite {
    /// First fence of a transaction commit (log entries durable).
    TxEntries,
    /// Second fence of a transaction commit (COMMIT record durable).
    TxCommit,
    AtomicUpdate,
    Plass,
    Root,
    Header,
    Gc,
    Recovery,
    Other,
}

impl FenceSite {
    pub const ALL: [FenceSite; 9] = [
        FenceSite::TxEntries,
        FenceSite::TxCommit,
        FenceSite::AtomicUpdate,
        FenceSite::Plass,
        FenceSite::Root,
        FenceSite::Header,
        FenceSite::Gc,
        FenceSite::Recovery,
        FenceSite::Other,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

/// How a crash treats lines that were flushed but not yet fenced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CrashPlan {
    /// Lose every pending line.
    DropPending,
    /// Keep every pending line.
    KeepPending,
    /// Keep each pending line with probability 1/2, seeded.
    Random(u64),
    /// Keep exactly the listed line indices (others are dropped).
    Keep(Vec<usize>),
}

impl CrashPlan {
    /// `Random` seeded from `UNIHEAP_CRASH_SEED`, or a fixed seed when unset.
    pub fn from_env() -> Self {
        let seed = std::env::var(CRASH_SEED_ENV)
            .ok()
            .and_then(|s| s.trim().parse::<u64>().ok())
            .unwrap_or(DEFAULT_CRASH_SEED);
        CrashPlan::Random(seed)
    }
}

#[derive(Default)]
struct Frozen {
    persisted: Vec<u8>,
    pending: BTreeMap<usize, Line>,
}

struct DeviceState {
    volatile: Vec<u8>,
    persisted: Vec<u8>,
    line_flags: Vec<u8>,
    pending: BTreeMap<usize, Line>,
    trap: Option<u64>,
    frozen: Option<Frozen>,
    file: Option<File>,
}

/// A simulated NVM device. Internally synchronized.
pub struct SimulatedNvm {
    path: Option<PathBuf>,
    capacity: u64,
    state: RwLock<DeviceState>,
    fence_count: AtomicU64,
    flush_count: AtomicU64,
    fence_sites: [AtomicU64; FenceSite::ALL.len()],
    crash_plan: Mutex<CrashPlan>,
}

impl std::fmt::Debug for SimulatedNvm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimulatedNvm")
            .field("path", &self.path)
            .field("capacity", &self.capacity)
            .field("fence_count", &self.fence_count())
            .field("flush_count", &self.flush_count())
            .finish()
    }
}

fn check_capacity(capacity: u64) -> Result<()> {
    if capacity == 0 || capacity % LINE_SIZE as u64 != 0 || usize::try_from(capacity).is_err() {
        return Err(Error::InvalidCapacity(capacity));
    }
    Ok(())
}

fn lines_of(offset: u64, len: u64) -> std::ops::Range<usize> {
    if len == 0 {
        return 0..0;
    }
    let first = (offset / LINE_SIZE as u64) as usize;
    let last = ((offset + len - 1) / LINE_SIZE as u64) as usize;
    first..last + 1
}

impl SimulatedNvm {
    fn with_image(path: Option<PathBuf>, file: Option<File>, image: Vec<u8>) -> Self {
        let capacity = image.len() as u64;
        let lines = image.len() / LINE_SIZE;
        SimulatedNvm {
            path,
            capacity,
            state: RwLock::new(DeviceState {
                volatile: image.clone(),
                persisted: image,
                line_flags: vec![0; lines],
                pending: BTreeMap::new(),
                trap: None,
                frozen: None,
                file,
            }),
            fence_count: AtomicU64::new(0),
            flush_count: AtomicU64::new(0),
            fence_sites: Default::default(),
            crash_plan: Mutex::new(CrashPlan::from_env()),
        }
    }

    /// Creates a zero-filled, file-backed device, truncating any existing file.
    pub fn create(path: impl AsRef<Path>, capacity: u64) -> Result<Self> {
        check_capacity(capacity)?;
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&path)?;
        file.set_len(capacity)?;
        Ok(Self::with_image(
            Some(path),
            Some(file),
            vec![0; capacity as usize],
        ))
    }

    /// Opens an existing backing file; both views start as the file contents.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_inner(path.as_ref(), true)
    }

    /// Opens a backing file without ever writing to it. Fences on such a
    /// device only update the in-memory persisted view.
    pub fn open_read_only(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_inner(path.as_ref(), false)
    }

    fn open_inner(path: &Path, writable: bool) -> Result<Self> {
        let mut file = OpenOptions::new().read(true).write(writable).open(path)?;
        let mut image = Vec::new();
        file.read_to_end(&mut image)?;
        check_capacity(image.len() as u64)?;
        let file = writable.then_some(file);
        Ok(Self::with_image(Some(path.to_path_buf()), file, image))
    }

    /// A device with no backing file.
    pub fn in_memory(capacity: u64) -> Result<Self> {
        check_capacity(capacity)?;
        Ok(Self::with_image(None, None, vec![0; capacity as usize]))
    }

    /// An in-memory device whose both views equal `image`.
    pub fn from_image(image: Vec<u8>) -> Result<Self> {
        check_capacity(image.len() as u64)?;
        Ok(Self::with_image(None, None, image))
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    fn check_range(&self, offset: u64, len: u64) -> Result<()> {
        match offset.checked_add(len) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(Error::OutOfBounds {
                offset,
                len,
                capacity: self.capacity,
            }),
        }
    }

    /// Stores `data` into the volatile view.
    pub fn write(&self, offset: u64, data: &[u8]) -> Result<()> {
        self.check_range(offset, data.len() as u64)?;
        let mut st = self.state.write();
        let start = offset as usize;
        st.volatile[start..start + data.len()].copy_from_slice(data);
        for line in lines_of(offset, data.len() as u64) {
            st.line_flags[line] |= DIRTY;
        }
        Ok(())
    }

    /// Zeroes `[offset, offset+len)`, dirtying only lines that held nonzero bytes.
    pub fn zero_range(&self, offset: u64, len: u64) -> Result<()> {
        self.check_range(offset, len)?;
        let mut st = self.state.write();
        let end = offset + len;
        for line in lines_of(offset, len) {
            let lo = (line * LINE_SIZE).max(offset as usize);
            let hi = ((line + 1) * LINE_SIZE).min(end as usize);
            if st.volatile[lo..hi].iter().any(|&b| b != 0) {
                st.volatile[lo..hi].fill(0);
                st.line_flags[line] |= DIRTY;
            }
        }
        Ok(())
    }

    /// Stores one 8-byte word. A crash never tears it: the word sits inside a
    /// single cache line. Does not flush or fence.
    pub fn atomic_write_u64(&self, offset: u64, value: u64) -> Result<()> {
        if offset % 8 != 0 {
            return Err(Error::Misaligned(offset));
        }
        self.write(offset, &value.to_le_bytes())
    }

    /// Writes back the dirty lines covering the range.
    pub fn flush_range(&self, offset: u64, len: u64) -> Result<()> {
        self.check_range(offset, len)?;
        let mut st = self.state.write();
        let mut flushed = 0;
        for line in lines_of(offset, len) {
            if st.line_flags[line] & DIRTY == 0 {
                continue;
            }
            st.line_flags[line] &= !DIRTY;
            let base = line * LINE_SIZE;
            let mut copy: Line = Box::new([0; LINE_SIZE]);
            copy.copy_from_slice(&st.volatile[base..base + LINE_SIZE]);
            st.pending.insert(line, copy);
            flushed += 1;
        }
        self.flush_count.fetch_add(flushed, Ordering::Relaxed);
        Ok(())
    }

    /// Orders all pending write-backs: they become part of the persisted view.
    pub fn fence(&self) {
        self.fence_at(FenceSite::Other);
    }

    /// [`fence`](Self::fence), attributed to a call site.
    pub fn fence_at(&self, site: FenceSite) {
        let mut st = self.state.write();
        let index = self.fence_count.fetch_add(1, Ordering::SeqCst);
        self.fence_sites[site.slot()].fetch_add(1, Ordering::Relaxed);
        if st.frozen.is_none() && st.trap == Some(index) {
            let snapshot = Frozen {
                persisted: st.persisted.clone(),
                pending: st.pending.clone(),
            };
            st.frozen = Some(snapshot);
        }
        let pending = std::mem::take(&mut st.pending);
        if st.frozen.is_some() {
            return;
        }
        let st = &mut *st;
        for (&line, data) in &pending {
            let base = line * LINE_SIZE;
            st.persisted[base..base + LINE_SIZE].copy_from_slice(&data[..]);
        }
        if let Some(file) = &st.file {
            write_runs(file, &st.persisted, pending.keys().copied());
        }
    }

    pub fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.check_range(offset, buf.len() as u64)?;
        let st = self.state.read();
        let start = offset as usize;
        buf.copy_from_slice(&st.volatile[start..start + buf.len()]);
        Ok(())
    }

    pub fn read_vec(&self, offset: u64, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; len];
        self.read(offset, &mut buf)?;
        Ok(buf)
    }

    pub fn read_u64(&self, offset: u64) -> Result<u64> {
        let mut b = [0; 8];
        self.read(offset, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_u32(&self, offset: u64) -> Result<u32> {
        let mut b = [0; 4];
        self.read(offset, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    /// Reads from the persisted view.
    pub fn read_persisted(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.check_range(offset, buf.len() as u64)?;
        let st = self.state.read();
        let start = offset as usize;
        buf.copy_from_slice(&st.persisted[start..start + buf.len()]);
        Ok(())
    }

    /// A copy of the whole persisted view.
    pub fn persisted_image(&self) -> Vec<u8> {
        self.state.read().persisted.clone()
    }

    /// A copy of the whole volatile view.
    pub fn volatile_image(&self) -> Vec<u8> {
        self.state.read().volatile.clone()
    }

    pub fn fence_count(&self) -> u64 {
        self.fence_count.load(Ordering::SeqCst)
    }

    pub fn flush_count(&self) -> u64 {
        self.flush_count.load(Ordering::Relaxed)
    }

    /// Fence totals per call site (sites with zero fences included).
    pub fn fence_breakdown(&self) -> Vec<(FenceSite, u64)> {
        FenceSite::ALL
            .iter()
            .map(|&s| (s, self.fence_sites[s.slot()].load(Ordering::Relaxed)))
            .collect()
    }

    pub fn dirty_lines(&self) -> Vec<usize> {
        let st = self.state.read();
        st.line_flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f & DIRTY != 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Lines flushed but not yet fenced. After a crash trap fired, these are
    /// the lines that were pending at the trapped fence.
    pub fn pending_lines(&self) -> Vec<usize> {
        let st = self.state.read();
        match &st.frozen {
            Some(f) => f.pending.keys().copied().collect(),
            None => st.pending.keys().copied().collect(),
        }
    }

    pub fn set_crash_plan(&self, plan: CrashPlan) {
        *self.crash_plan.lock() = plan;
    }

    /// Freezes the persisted view just before the fence whose zero-based
    /// index equals `fence_index` runs. Later fences stop persisting; the
    /// volatile world carries on so the caller can finish its workload.
    pub fn arm_crash_at_fence(&self, fence_index: u64) {
        let mut st = self.state.write();
        st.trap = Some(fence_index);
    }

    /// Whether an armed crash trap has fired.
    pub fn crash_trap_fired(&self) -> bool {
        self.state.read().frozen.is_some()
    }

    /// Simulates power loss using the configured [`CrashPlan`].
    pub fn crash(&self) -> Result<SimulatedNvm> {
        let plan = self.crash_plan.lock().clone();
        self.crash_with(&plan)
    }

    /// Simulates power loss: the returned device holds the persisted view
    /// plus the pending lines selected by `plan`. Counters start at zero. For
    /// a file-backed device the backing file is rewritten with that image.
    ///
    /// Callers must not run operations on `self` afterwards.
    pub fn crash_with(&self, plan: &CrashPlan) -> Result<SimulatedNvm> {
        let image = {
            let st = self.state.read();
            let (base, pending) = match &st.frozen {
                Some(f) => (&f.persisted, &f.pending),
                None => (&st.persisted, &st.pending),
            };
            let mut image = base.clone();
            let mut rng = match plan {
                CrashPlan::Random(seed) => Some(ChaCha8Rng::seed_from_u64(*seed)),
                _ => None,
            };
            for (&line, data) in pending {
                let keep = match plan {
                    CrashPlan::DropPending => false,
                    CrashPlan::KeepPending => true,
                    CrashPlan::Random(_) => rng.as_mut().map(|r| r.gen_bool(0.5)).unwrap_or(false),
                    CrashPlan::Keep(lines) => lines.contains(&line),
                };
                if keep {
                    let b = line * LINE_SIZE;
                    image[b..b + LINE_SIZE].copy_from_slice(&data[..]);
                }
            }
            image
        };
        match &self.path {
            Some(path) if self.state.read().file.is_some() => {
                std::fs::write(path, &image)?;
                SimulatedNvm::open(path)
            }
            _ => SimulatedNvm::from_image(image),
        }
    }
}

fn write_runs(file: &File, image: &[u8], lines: impl Iterator<Item = usize>) {
    let mut run: Option<(usize, usize)> = None;
    let flush = |(start, end): (usize, usize)| {
        let lo = start * LINE_SIZE;
        let hi = end * LINE_SIZE;
        // A failed write-back cannot be reported from a fence; the in-memory
        // persisted view stays authoritative for this process.
        let _ = file.write_all_at(&image[lo..hi], lo as u64);
    };
    for line in lines {
        run = match run {
            Some((s, e)) if e == line => Some((s, e + 1)),
            Some(r) => {
                flush(r);
                Some((line, line + 1))
            }
            None => Some((line, line + 1)),
        };
    }
    if let Some(r) = run {
        flush(r);
    }
}
