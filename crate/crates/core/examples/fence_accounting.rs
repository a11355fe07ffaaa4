// Fence counts per operation, and the batching win of a transaction over
// fencing every write.

use uniheap::heapctl::{run_bench, BenchConfig, Workload};
use uniheap::Heap;

pub fn run_example() -> uniheap::Result<()> {
    for (workload, baseline) in [
        (Workload::C, false),
        (Workload::A, false),
        (Workload::A, true),
        (Workload::F, false),
    ] {
        let heap = Heap::create_in_memory("fences", 8 << 20)?;
        let cfg = BenchConfig {
            workload,
            baseline,
            ops: 500,
            records: 200,
            writes_per_tx: 10,
            ..Default::default()
        };
        let r = run_bench(&heap, &cfg)?;
        println!(
            "{workload:?}{}: {} txs, {} fences ({:.2}/tx), breakdown {:?}",
            if baseline { " (per-write)" } else { "" },
            r.committed_txs,
            r.fence_total,
            r.fences_per_tx,
            r.fence_breakdown
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> uniheap::Result<()> {
    run_example()
}
