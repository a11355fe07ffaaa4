// A runtime registers its live references (vroots). The collector keeps
// everything reachable from durable roots or vroots, compacts ids, and
// coalesces each surviving field's history into one checkpoint record.

use std::sync::{Arc, Mutex};

use uniheap::plass::fields;
use uniheap::{Forwarding, Heap, ObjectRef, UniType, Value, VrootProvider};

struct Runtime {
    held: Mutex<Vec<ObjectRef>>,
}

impl VrootProvider for Runtime {
    fn vroots(&self) -> Vec<ObjectRef> {
        self.held.lock().unwrap().clone()
    }

    fn relocated(&self, fwd: &Forwarding) {
        for r in self.held.lock().unwrap().iter_mut() {
            *r = fwd.get(*r).unwrap_or(ObjectRef::NULL);
        }
    }
}

pub fn run_example() -> uniheap::Result<()> {
    let heap = Heap::create_in_memory("gc", 1 << 20)?;
    let counter = heap.init_plass("Counter", &fields([("hits", UniType::Long)]))?;
    let objs = heap.with_tx(|tx| (0..6).map(|_| tx.alloc_obj(counter, None)).collect::<uniheap::Result<Vec<_>>>())?;
    for i in 0..50 {
        heap.write_field_atomic(objs[5], 0, Value::Long(i))?;
    }
    heap.set_root("kept", objs[1])?;

    let rt = Arc::new(Runtime {
        held: Mutex::new(vec![objs[5]]),
    });
    let _registration = heap.register_runtime(SharedRuntime(rt.clone()));

    let report = heap.request_gc()?;
    println!(
        "live {}, reclaimed {}, log {} -> {} bytes, {} fences",
        report.live, report.reclaimed, report.log_bytes_before, report.log_bytes_after, report.fences
    );
    let moved = rt.held.lock().unwrap()[0];
    println!("runtime reference {} now {} = {:?}", objs[5], moved, heap.read_field(moved, 0)?);
    println!("root 'kept' now {:?}", heap.get_root("kept"));
    Ok(())
}

struct SharedRuntime(Arc<Runtime>);

impl VrootProvider for SharedRuntime {
    fn vroots(&self) -> Vec<ObjectRef> {
        self.0.vroots()
    }

    fn relocated(&self, fwd: &Forwarding) {
        self.0.relocated(fwd)
    }
}

#[allow(dead_code)]
fn main() -> uniheap::Result<()> {
    run_example()
}
