// Offline consistency checking of a heap image, clean and corrupted.

use uniheap::heapctl::verify_image;
use uniheap::plass::fields;
use uniheap::{Heap, UniType, Value};

pub fn run_example() -> uniheap::Result<()> {
    let heap = Heap::create_in_memory("verify", 1 << 20)?;
    let p = heap.init_plass("P", &fields([("x", UniType::Int)]))?;
    let o = heap.with_tx(|tx| {
        let o = tx.alloc_obj(p, None)?;
        tx.write_field(o, 0, Value::Int(7))?;
        Ok(o)
    })?;
    heap.set_root("p", o)?;

    let mut image = heap.device().persisted_image();
    let clean = verify_image(&image)?;
    println!("clean image: {} violations, checked {:?}", clean.violations.len(), clean.checked);

    // Flip one byte inside the first log record.
    let (off, _) = heap.log_entries()?[0];
    image[off as usize + 12] ^= 0x40;
    for v in verify_image(&image)?.violations {
        println!("corrupted image: {} at {}: {}", v.code, v.location, v.detail);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> uniheap::Result<()> {
    run_example()
}
