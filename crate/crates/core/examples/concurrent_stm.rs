// Several threads transfer between shared counters. Versioned locks detect
// conflicts at read or commit time and the transaction is simply re-run.

use std::thread;

use uniheap::plass::fields;
use uniheap::{Heap, UniType, Value};

pub fn run_example() -> uniheap::Result<()> {
    let heap = Heap::create_in_memory("stm", 4 << 20)?;
    let cell = heap.init_plass("Cell", &fields([("n", UniType::Long)]))?;
    let cells = heap.with_tx(|tx| {
        (0..4)
            .map(|_| {
                let c = tx.alloc_obj(cell, None)?;
                tx.write_field(c, 0, Value::Long(1000))?;
                Ok(c)
            })
            .collect::<uniheap::Result<Vec<_>>>()
    })?;

    thread::scope(|s| {
        for t in 0..4usize {
            let heap = heap.clone();
            let cells = cells.clone();
            s.spawn(move || {
                for i in 0..200usize {
                    let (from, to) = (cells[(t + i) % 4], cells[(t + i + 1) % 4]);
                    heap.with_tx(|tx| {
                        let f = tx.read_field(from, 0)?.as_long().unwrap_or(0);
                        let d = tx.read_field(to, 0)?.as_long().unwrap_or(0);
                        tx.write_field(from, 0, Value::Long(f - 1))?;
                        tx.write_field(to, 0, Value::Long(d + 1))
                    })
                    .expect("transfer");
                }
            });
        }
    });

    let total: i64 = cells
        .iter()
        .map(|&c| heap.read_field(c, 0).map(|v| v.as_long().unwrap_or(0)))
        .sum::<uniheap::Result<i64>>()?;
    println!("total after 800 transfers: {total} (conserved: {})", total == 4000);
    Ok(())
}

#[allow(dead_code)]
fn main() -> uniheap::Result<()> {
    run_example()
}
