// Define a class, allocate a linked pair of objects in one transaction,
// publish it under a durable root and read it back.

use uniheap::plass::fields;
use uniheap::{Heap, UniType, Value};

pub fn run_example() -> uniheap::Result<()> {
    let heap = Heap::create_in_memory("quickstart", 1 << 20)?;
    let node = heap.init_plass(
        "Node",
        &fields([("value", UniType::Long), ("next", UniType::Reference)]),
    )?;

    let head = heap.with_tx(|tx| {
        let tail = tx.alloc_obj(node, None)?;
        tx.write_field(tail, 0, Value::Long(2))?;
        let head = tx.alloc_obj(node, None)?;
        tx.write_field(head, 0, Value::Long(1))?;
        tx.write_field_named(head, "next", Value::Reference(tail))?;
        Ok(head)
    })?;
    heap.set_root("list", head)?;

    let mut cur = heap.get_root("list");
    while let Some(r) = cur.filter(|r| !r.is_null()) {
        println!("{r}: value = {:?}", heap.read_field_named(r, "value")?);
        cur = heap.read_field(r, 1)?.as_reference();
    }
    let stats = heap.heap_stats();
    println!(
        "{} objects, {} log bytes, {} fences so far",
        stats.live_count, stats.log_bytes_used, stats.fence_count
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> uniheap::Result<()> {
    run_example()
}
