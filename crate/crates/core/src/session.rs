//! File-backed heap sessions with single-writer locking.
//!
//! A read-write session holds `<path>.lock`, a file containing the writer's
//! process id. Read-only sessions take no lock and see the heap as of the
//! last fence the writer issued (the file holds only the persisted view).

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gc::{GcReport, RuntimeHandle, VrootProvider};
use crate::heap::{Heap, HeapOptions, HeapStats};
use crate::layout::MAGIC;
use crate::object::ObjectRef;
use crate::plass::FieldDef;
use crate::pmem::SimulatedNvm;
use crate::recovery::RecoveryReport;
use crate::tx::{CommitResult, Transaction};
use crate::types::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpenMode {
    ReadWrite,
    ReadOnly,
}

pub fn lock_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".lock");
    PathBuf::from(s)
}

fn pid_alive(pid: u32) -> bool {
    if pid == 0 || pid > i32::MAX as u32 {
        return false;
    }
    // SAFETY: signal 0 performs only the existence and permission check.
    let rc = unsafe { libc::kill(pid as libc::pid_t, 0) };
    rc == 0 || std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

#[derive(Debug)]
struct WriterLock {
    path: PathBuf,
}

impl WriterLock {
    fn acquire(heap_path: &Path, reclaim_stale: bool) -> Result<WriterLock> {
        let path = lock_path(heap_path);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id())?;
                    f.sync_all()?;
                    return Ok(WriterLock { path });
                }
                Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                    let mut s = String::new();
                    if let Ok(mut f) = fs::File::open(&path) {
                        let _ = f.read_to_string(&mut s);
                    }
                    let pid = s.trim().parse::<u32>().unwrap_or(0);
                    if pid_alive(pid) || !reclaim_stale {
                        return Err(Error::LockHeld(pid));
                    }
                    match fs::remove_file(&path) {
                        Ok(()) => {}
                        Err(e) if e.kind() == ErrorKind::NotFound => {}
                        Err(e) => return Err(e.into()),
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(Error::LockHeld(0))
    }
}

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// An open heap file plus the runtimes registered through it.
pub struct HeapSession {
    heap: Heap,
    mode: OpenMode,
    runtimes: Mutex<Vec<RuntimeHandle>>,
    lock: Option<WriterLock>,
}

impl std::fmt::Debug for HeapSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HeapSession")
            .field("heap", &self.heap)
            .field("mode", &self.mode)
            .finish()
    }
}

impl HeapSession {
    /// Creates a heap file of `size` bytes and opens it read-write.
    pub fn create(path: impl AsRef<Path>, size: u64, name: &str, force: bool) -> Result<HeapSession> {
        let path = path.as_ref();
        let lock = WriterLock::acquire(path, false)?;
        if !force {
            if let Ok(mut f) = fs::File::open(path) {
                let mut magic = [0u8; 8];
                if f.read_exact(&mut magic).is_ok() && magic == MAGIC {
                    return Err(Error::AlreadyFormatted);
                }
            }
        }
        let dev = SimulatedNvm::create(path, size)?;
        let heap = Heap::create(dev, name, true)?;
        Ok(HeapSession {
            heap,
            mode: OpenMode::ReadWrite,
            runtimes: Mutex::new(Vec::new()),
            lock: Some(lock),
        })
    }

    pub fn open(path: impl AsRef<Path>, mode: OpenMode) -> Result<HeapSession> {
        Self::open_with(path, mode, false, HeapOptions::default())
    }

    /// Opens with explicit options. `reclaim_stale_lock` removes a lock file
    /// whose writer process no longer exists.
    pub fn open_with(
        path: impl AsRef<Path>,
        mode: OpenMode,
        reclaim_stale_lock: bool,
        options: HeapOptions,
    ) -> Result<HeapSession> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::NotAHeap);
        }
        let (heap, lock) = match mode {
            OpenMode::ReadWrite => {
                let lock = WriterLock::acquire(path, reclaim_stale_lock)?;
                let dev = SimulatedNvm::open(path)?;
                (Heap::open_with(dev, false, options)?, Some(lock))
            }
            OpenMode::ReadOnly => {
                let dev = SimulatedNvm::open_read_only(path)?;
                (Heap::open_with(dev, true, options)?, None)
            }
        };
        Ok(HeapSession {
            heap,
            mode,
            runtimes: Mutex::new(Vec::new()),
            lock,
        })
    }

    /// Persists header deltas, then releases the writer lock.
    pub fn close(self) -> Result<()> {
        self.runtimes.lock().clear();
        self.heap.close()
    }

    pub fn heap(&self) -> &Heap {
        &self.heap
    }

    pub fn mode(&self) -> OpenMode {
        self.mode
    }

    pub fn path(&self) -> Option<&Path> {
        self.heap.device().path()
    }

    /// What recovery did when this session opened the heap.
    pub fn recover_report(&self) -> RecoveryReport {
        self.heap.recovery_report()
    }

    pub fn holds_writer_lock(&self) -> bool {
        self.lock.is_some()
    }

    pub fn atomic_begin(&self) -> Result<Transaction> {
        self.heap.atomic_begin()
    }

    pub fn atomic_end(&self, tx: Transaction) -> Result<CommitResult> {
        tx.atomic_end()
    }

    pub fn abort(&self, tx: Transaction) -> Result<()> {
        tx.abort()
    }

    pub fn alloc_obj(&self, tx: &mut Transaction, plass_id: u32, array_length: Option<u64>) -> Result<ObjectRef> {
        tx.alloc_obj(plass_id, array_length)
    }

    /// Reads through `tx` when given, otherwise outside any transaction.
    pub fn read_field(&self, tx: Option<&mut Transaction>, r: ObjectRef, index: u64) -> Result<Value> {
        match tx {
            Some(tx) => tx.read_field(r, index),
            None => self.heap.read_field(r, index),
        }
    }

    pub fn write_field(&self, tx: &mut Transaction, r: ObjectRef, index: u64, value: Value) -> Result<()> {
        tx.write_field(r, index, value)
    }

    pub fn write_field_atomic(&self, r: ObjectRef, index: u64, value: Value) -> Result<()> {
        self.heap.write_field_atomic(r, index, value)
    }

    pub fn set_root(&self, name: &str, r: ObjectRef) -> Result<()> {
        self.heap.set_root(name, r)
    }

    pub fn get_root(&self, name: &str) -> Option<ObjectRef> {
        self.heap.get_root(name)
    }

    pub fn list_roots(&self) -> Vec<(String, ObjectRef)> {
        self.heap.list_roots()
    }

    pub fn init_plass(&self, name: &str, fields: &[FieldDef]) -> Result<u32> {
        self.heap.init_plass(name, fields)
    }

    pub fn exists_plass(&self, name: &str) -> Option<u32> {
        self.heap.exists_plass(name)
    }

    /// Registers a runtime for the lifetime of this session.
    pub fn register_runtime(&self, provider: impl VrootProvider + 'static) -> u64 {
        let h = self.heap.register_runtime(provider);
        let id = h.runtime_id();
        self.runtimes.lock().push(h);
        id
    }

    pub fn unregister_runtime(&self, runtime_id: u64) {
        self.runtimes.lock().retain(|h| h.runtime_id() != runtime_id);
    }

    pub fn request_gc(&self) -> Result<GcReport> {
        self.heap.request_gc()
    }

    pub fn heap_stats(&self) -> HeapStats {
        self.heap.heap_stats()
    }

    pub fn fence_count(&self) -> u64 {
        self.heap.fence_count()
    }
}
