//! Library side of the `heapctl` administration tool.
//!
//! Each subcommand of the binary is a thin wrapper over a function here, so
//! the same operations are scriptable from Rust.

pub mod bench;
pub mod verify;

use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::heap::HeapStats;
use crate::layout::HeapHeader;
use crate::object::ObjectRef;
use crate::plass::Plass;
use crate::pmem::SimulatedNvm;
use crate::recovery::RecoveryReport;
use crate::session::{HeapSession, OpenMode};

pub use bench::{run_bench, BenchConfig, BenchReport, Workload};
pub use verify::{verify_image, Violation, VerifyReport};

#[derive(Debug, Clone, Serialize)]
pub struct RootInfo {
    pub name: String,
    pub object: ObjectRef,
    pub plass: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InfoReport {
    pub header: HeapHeader,
    pub stats: HeapStats,
    pub roots: Vec<RootInfo>,
    pub plasses: Vec<Plass>,
    pub recovery: RecoveryReport,
}

/// Summarises a heap file without modifying it.
pub fn info(path: &Path) -> Result<InfoReport> {
    let s = HeapSession::open(path, OpenMode::ReadOnly)?;
    let heap = s.heap();
    let roots = heap
        .list_roots()
        .into_iter()
        .map(|(name, object)| RootInfo {
            plass: heap.object_plass(object).ok().map(|p| p.name),
            name,
            object,
        })
        .collect();
    Ok(InfoReport {
        header: heap.header()?,
        stats: heap.heap_stats(),
        roots,
        plasses: heap.plasses(),
        recovery: heap.recovery_report(),
    })
}

/// Checks the persisted image of a heap file. Never writes to the file.
pub fn verify_file(path: &Path) -> Result<VerifyReport> {
    let dev = SimulatedNvm::open_read_only(path)?;
    verify_image(&dev.persisted_image())
}
