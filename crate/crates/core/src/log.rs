//! Fixed-size log records.
//!
//! Wire format (40 bytes, little-endian):
//!
//! | off | size | field                                   |
//! |-----|------|-----------------------------------------|
//! | 0   | 1    | kind                                    |
//! | 1   | 1    | type tag                                |
//! | 2   | 2    | reserved                                |
//! | 4   | 4    | CRC-32C over the record, crc zeroed     |
//! | 8   | 8    | tx id                                   |
//! | 16  | 8    | object id                               |
//! | 24  | 4    | field index / plass id / field count    |
//! | 28  | 4    | reserved                                |
//! | 32  | 8    | value                                   |

use crc::{Crc, CRC_32_ISCSI};
use serde::Serialize;

use crate::layout::ENTRY_SIZE;

pub const CASTAGNOLI: Crc<u32> = Crc::<u32>::new(&CRC_32_ISCSI);

/// Byte offset of the value word inside a record.
pub const VALUE_OFFSET: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum EntryKind {
    Update = 1,
    Alloc = 2,
    Commit = 3,
    CheckpointHdr = 4,
    CheckpointVal = 5,
    AtomicUpdate = 6,
}

impl EntryKind {
    pub fn from_u8(v: u8) -> Option<EntryKind> {
        Some(match v {
            1 => EntryKind::Update,
            2 => EntryKind::Alloc,
            3 => EntryKind::Commit,
            4 => EntryKind::CheckpointHdr,
            5 => EntryKind::CheckpointVal,
            6 => EntryKind::AtomicUpdate,
            _ => return None,
        })
    }

    /// Takes effect on its own, without a COMMIT record.
    pub fn self_committing(self) -> bool {
        matches!(
            self,
            EntryKind::CheckpointHdr | EntryKind::CheckpointVal | EntryKind::AtomicUpdate
        )
    }

    /// Carries a field value.
    pub fn is_value(self) -> bool {
        matches!(
            self,
            EntryKind::Update | EntryKind::CheckpointVal | EntryKind::AtomicUpdate
        )
    }
}

/// A decoded log record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LogEntry {
    pub kind: EntryKind,
    pub type_tag: u8,
    pub tx_id: u64,
    pub object_id: u64,
    /// Field index; plass id for ALLOC; field count for CHECKPOINT_HDR.
    pub field_index: u32,
    /// Widened value; array length for ALLOC and CHECKPOINT_HDR; entry
    /// count for COMMIT.
    pub value: u64,
}

/// Result of decoding one 40-byte slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// All zero bytes: never written.
    Empty,
    Valid(LogEntry),
    /// Non-zero bytes that do not form a valid record (torn or corrupt).
    Invalid,
}

impl LogEntry {
    pub fn update(tx_id: u64, object_id: u64, field_index: u32, type_tag: u8, value: u64) -> Self {
        LogEntry {
            kind: EntryKind::Update,
            type_tag,
            tx_id,
            object_id,
            field_index,
            value,
        }
    }

    pub fn alloc(tx_id: u64, object_id: u64, plass_id: u32, array_length: u64) -> Self {
        LogEntry {
            kind: EntryKind::Alloc,
            type_tag: 0,
            tx_id,
            object_id,
            field_index: plass_id,
            value: array_length,
        }
    }

    pub fn commit(tx_id: u64, entry_count: u64) -> Self {
        LogEntry {
            kind: EntryKind::Commit,
            type_tag: 0,
            tx_id,
            object_id: 0,
            field_index: 0,
            value: entry_count,
        }
    }

    pub fn checkpoint_hdr(object_id: u64, field_count: u32, array_length: u64) -> Self {
        LogEntry {
            kind: EntryKind::CheckpointHdr,
            type_tag: 0,
            tx_id: 0,
            object_id,
            field_index: field_count,
            value: array_length,
        }
    }

    pub fn checkpoint_val(object_id: u64, field_index: u32, type_tag: u8, value: u64) -> Self {
        LogEntry {
            kind: EntryKind::CheckpointVal,
            type_tag,
            tx_id: 0,
            object_id,
            field_index,
            value,
        }
    }

    pub fn atomic_update(object_id: u64, field_index: u32, type_tag: u8, value: u64) -> Self {
        LogEntry {
            kind: EntryKind::AtomicUpdate,
            type_tag,
            tx_id: 0,
            object_id,
            field_index,
            value,
        }
    }

    pub fn encode(&self) -> [u8; ENTRY_SIZE as usize] {
        let mut b = [0u8; ENTRY_SIZE as usize];
        b[0] = self.kind as u8;
        b[1] = self.type_tag;
        b[8..16].copy_from_slice(&self.tx_id.to_le_bytes());
        b[16..24].copy_from_slice(&self.object_id.to_le_bytes());
        b[24..28].copy_from_slice(&self.field_index.to_le_bytes());
        b[32..40].copy_from_slice(&self.value.to_le_bytes());
        let crc = CASTAGNOLI.checksum(&b);
        b[4..8].copy_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Slot {
        debug_assert_eq!(b.len(), ENTRY_SIZE as usize);
        if b.iter().all(|&x| x == 0) {
            return Slot::Empty;
        }
        let stored = u32::from_le_bytes(b[4..8].try_into().unwrap());
        let mut copy = [0u8; ENTRY_SIZE as usize];
        copy.copy_from_slice(b);
        copy[4..8].fill(0);
        if CASTAGNOLI.checksum(&copy) != stored {
            return Slot::Invalid;
        }
        let Some(kind) = EntryKind::from_u8(b[0]) else {
            return Slot::Invalid;
        };
        let w = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        Slot::Valid(LogEntry {
            kind,
            type_tag: b[1],
            tx_id: w(8),
            object_id: w(16),
            field_index: u32::from_le_bytes(b[24..28].try_into().unwrap()),
            value: w(32),
        })
    }
}
