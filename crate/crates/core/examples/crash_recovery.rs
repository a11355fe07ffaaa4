// Power loss in the middle of a commit. A crash before the COMMIT record's
// fence loses the whole transaction; a crash after it loses nothing.

use uniheap::plass::fields;
use uniheap::{CrashPlan, Heap, SimulatedNvm, UniType, Value};

pub fn run_example() -> uniheap::Result<()> {
    let heap = Heap::create_in_memory("crash", 1 << 20)?;
    let acct = heap.init_plass("Account", &fields([("balance", UniType::Long)]))?;
    let (a, b) = heap.with_tx(|tx| {
        let a = tx.alloc_obj(acct, None)?;
        let b = tx.alloc_obj(acct, None)?;
        tx.write_field(a, 0, Value::Long(100))?;
        Ok((a, b))
    })?;
    heap.set_root("a", a)?;
    heap.set_root("b", b)?;

    // A transfer costs two fences: entries, then the COMMIT record.
    for (name, fence_offset) in [("before COMMIT fence", 1), ("after COMMIT fence", 2)] {
        let image = heap.device().persisted_image();
        let dev = SimulatedNvm::from_image(image)?;
        let h = Heap::open(dev)?;
        let start = h.fence_count();
        h.device().arm_crash_at_fence(start + fence_offset);
        h.with_tx(|tx| {
            tx.write_field(a, 0, Value::Long(40))?;
            tx.write_field(b, 0, Value::Long(60))
        })?;
        let recovered = Heap::open(h.device().crash_with(&CrashPlan::DropPending)?)?;
        let (ra, rb) = (recovered.read_field(a, 0)?, recovered.read_field(b, 0)?);
        println!("crash {name}: a = {ra:?}, b = {rb:?}");
        println!("  recovery: {:?}", recovered.recovery_report());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> uniheap::Result<()> {
    run_example()
}
