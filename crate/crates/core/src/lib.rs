//! A persistent object heap shared by several language runtimes.
//!
//! Objects live on a simulated non-volatile memory device ([`pmem`]) laid out
//! as a header, a plass (persistent class) region, a root table, and paired
//! object spaces, log segments and valid bitmaps ([`layout`]). Object headers
//! sit in 16-byte chunks; field values are never updated in place but
//! appended to a log ([`log`]) and located through per-object field index
//! tables kept in DRAM ([`object`]).
//!
//! Mutation goes through transactions ([`tx`]) that combine versioned-lock
//! STM with a redo-only durable commit costing exactly two fences. A
//! stop-the-world mark-compact collector ([`gc`]) copies live objects and the
//! newest value of every written field into the inactive spaces and flips
//! the epoch. Opening a heap replays the log ([`recovery`]).
//!
//! [`HeapSession`] adds a single-writer file lock on top of [`Heap`]; the
//! [`ffi`] module exposes the same surface over a C ABI.
//!
//! ```
//! use uniheap::{Heap, SimulatedNvm, UniType, Value, plass::fields};
//!
//! let heap = Heap::create_in_memory("demo", 1 << 20).unwrap();
//! let point = heap.init_plass("Point", &fields([("x", UniType::Long), ("y", UniType::Long)])).unwrap();
//! let mut tx = heap.atomic_begin().unwrap();
//! let p = tx.alloc_obj(point, None).unwrap();
//! tx.write_field(p, 0, Value::Long(3)).unwrap();
//! tx.atomic_end().unwrap();
//! heap.set_root("origin", p).unwrap();
//! assert_eq!(heap.read_field(p, 0).unwrap(), Value::Long(3));
//! ```

pub mod error;
pub mod ffi;
pub mod gc;
pub mod heap;
pub mod heapctl;
pub mod layout;
pub mod log;
pub mod object;
pub mod plass;
pub mod pmem;
pub mod recovery;
pub mod session;
pub mod tx;
pub mod types;

pub use error::{Error, Result};
pub use gc::{Forwarding, GcReport, RuntimeHandle, VrootProvider};
pub use heap::{Heap, HeapOptions, HeapStats};
pub use object::{FieldIndexTable, LookupCounter, ObjectRef};
pub use plass::{FieldDef, Plass};
pub use pmem::{CrashPlan, FenceSite, SimulatedNvm};
pub use recovery::RecoveryReport;
pub use session::{HeapSession, OpenMode};
pub use tx::{CommitResult, Transaction, TxState};
pub use types::{map_foreign_type, Language, UniType, Value};
