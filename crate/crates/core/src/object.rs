//! Object references and the volatile field index tables.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plass::Plass;
use crate::types::UniType;

/// Reference to a heap object: 1 + its chunk index in the active object
/// space. Id 0 is the null reference. Ids are stable within an epoch and
/// remapped by garbage collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectRef(pub u64);

impl ObjectRef {
    pub const NULL: ObjectRef = ObjectRef(0);

    pub fn is_null(self) -> bool {
        self.0 == 0
    }

    pub fn id(self) -> u64 {
        self.0
    }
}

impl fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Counts field-table lookups so callers can check reads stay O(1).
#[derive(Debug, Default)]
pub struct LookupCounter(AtomicU64);

impl LookupCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

/// Per-object map from field ordinal to the device offset of the newest
/// committed value record. Zero means the field was never written.
#[derive(Debug)]
pub struct FieldIndexTable {
    offsets: Box<[AtomicU64]>,
}

impl FieldIndexTable {
    pub fn new(len: usize) -> Self {
        FieldIndexTable {
            offsets: (0..len).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// One array access.
    pub fn translate(&self, index: u64, lookups: &LookupCounter) -> Result<u64> {
        lookups.bump();
        self.offsets
            .get(index as usize)
            .map(|o| o.load(Ordering::Acquire))
            .ok_or(Error::IndexOutOfRange {
                index,
                len: self.offsets.len() as u64,
            })
    }

    pub fn set(&self, index: usize, offset: u64) {
        self.offsets[index].store(offset, Ordering::Release);
    }

    pub fn get(&self, index: usize) -> u64 {
        self.offsets[index].load(Ordering::Acquire)
    }

    pub fn snapshot(&self) -> Vec<u64> {
        self.offsets.iter().map(|o| o.load(Ordering::Acquire)).collect()
    }
}

/// Volatile bookkeeping for one allocated object.
#[derive(Debug)]
pub(crate) struct ObjectSlot {
    pub plass: Arc<Plass>,
    pub array_length: u64,
    pub table: FieldIndexTable,
    /// Mirrors the valid bit: set once the allocating transaction committed.
    pub committed: AtomicBool,
}

impl ObjectSlot {
    pub fn new(plass: Arc<Plass>, array_length: u64, committed: bool) -> Self {
        let len = if plass.is_array() {
            array_length as usize
        } else {
            plass.field_count()
        };
        ObjectSlot {
            plass,
            array_length,
            table: FieldIndexTable::new(len),
            committed: AtomicBool::new(committed),
        }
    }

    pub fn len(&self) -> u64 {
        self.table.len() as u64
    }

    pub fn is_committed(&self) -> bool {
        self.committed.load(Ordering::Acquire)
    }

    pub fn check_index(&self, index: u64) -> Result<usize> {
        if index < self.len() {
            Ok(index as usize)
        } else {
            Err(Error::IndexOutOfRange {
                index,
                len: self.len(),
            })
        }
    }

    pub fn slot_type(&self, index: usize) -> UniType {
        self.plass.slot_type(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translate_counts_and_bounds() {
        let c = LookupCounter::default();
        let t = FieldIndexTable::new(4);
        assert_eq!(t.translate(2, &c).unwrap(), 0);
        t.set(3, 4096);
        assert_eq!(t.translate(3, &c).unwrap(), 4096);
        assert!(matches!(
            t.translate(4, &c),
            Err(Error::IndexOutOfRange { index: 4, len: 4 })
        ));
        assert_eq!(c.get(), 3);
    }
}
