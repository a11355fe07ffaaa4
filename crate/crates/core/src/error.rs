use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the heap can report.
///
/// Variants map one-to-one onto the documented error names so that the C
/// boundary can hand a stable status code to foreign bindings (see
/// [`Error::code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid device capacity {0} (must be a positive multiple of 64)")]
    InvalidCapacity(u64),
    #[error("access [{offset}, {offset}+{len}) outside device of {capacity} bytes")]
    OutOfBounds { offset: u64, len: u64, capacity: u64 },
    #[error("offset {0} is not 8-byte aligned")]
    Misaligned(u64),

    #[error("name {name:?} is longer than {max} bytes")]
    NameTooLong { name: String, max: usize },
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("geometry needs {needed} bytes but the device has {capacity}")]
    GeometryTooLarge { needed: u64, capacity: u64 },
    #[error("device already holds a heap (use force to overwrite)")]
    AlreadyFormatted,
    #[error("not a heap image")]
    NotAHeap,
    #[error("heap format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt heap header: {0}")]
    CorruptHeader(String),
    #[error("corrupt heap: {0}")]
    CorruptHeap(String),
    #[error("heap was opened read-only")]
    ReadOnly,

    #[error("object space is full")]
    ObjectSpaceFull,
    #[error("root table is full")]
    RootTableFull,
    #[error("plass {0:?} already exists with a different layout")]
    SchemaMismatch(String),
    #[error("plass region is full")]
    PlassRegionFull,
    #[error("unknown plass id {0}")]
    UnknownPlass(u32),
    #[error("invalid plass definition: {0}")]
    InvalidPlass(String),
    #[error("{language} type {foreign_type:?} has no heap type")]
    UnmappedType {
        language: &'static str,
        foreign_type: String,
    },
    #[error("field {0:?} not found")]
    NotFound(String),
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: u64, len: u64 },
    #[error("type mismatch: field is {expected}, value is {found}")]
    TypeMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("dangling reference to object {0}")]
    DanglingReference(u64),

    #[error("this thread already has an active transaction on the heap")]
    NestedTransaction,
    #[error("transaction is not active")]
    TxNotActive,
    #[error("transactional read observed a concurrent commit")]
    Conflict,
    #[error("log segment is full; run a garbage collection")]
    LogFull,

    #[error("a garbage collection is already running")]
    GcAlreadyRunning,
    #[error("runtime reported invalid vroot {0}")]
    InvalidVroot(u64),

    #[error("heap is locked by writer process {0}")]
    LockHeld(u32),
}

impl Error {
    /// Stable numeric code used across the C boundary. `0` is reserved for
    /// success and `1` for a transaction conflict result.
    pub fn code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::InvalidCapacity(_) => 3,
            Error::OutOfBounds { .. } => 4,
            Error::Misaligned(_) => 5,
            Error::NameTooLong { .. } => 6,
            Error::InvalidName(_) => 7,
            Error::GeometryTooLarge { .. } => 8,
            Error::AlreadyFormatted => 9,
            Error::NotAHeap => 10,
            Error::VersionMismatch { .. } => 11,
            Error::CorruptHeader(_) => 12,
            Error::CorruptHeap(_) => 13,
            Error::ReadOnly => 14,
            Error::ObjectSpaceFull => 15,
            Error::RootTableFull => 16,
            Error::SchemaMismatch(_) => 17,
            Error::PlassRegionFull => 18,
            Error::UnknownPlass(_) => 19,
            Error::InvalidPlass(_) => 20,
            Error::UnmappedType { .. } => 21,
            Error::NotFound(_) => 22,
            Error::IndexOutOfRange { .. } => 23,
            Error::TypeMismatch { .. } => 24,
            Error::DanglingReference(_) => 25,
            Error::NestedTransaction => 26,
            Error::TxNotActive => 27,
            Error::Conflict => 28,
            Error::LogFull => 29,
            Error::GcAlreadyRunning => 30,
            Error::InvalidVroot(_) => 31,
            Error::LockHeld(_) => 32,
        }
    }
}
