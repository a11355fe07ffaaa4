// A heap file shared by a single writer and any number of readers.

use uniheap::plass::fields;
use uniheap::{Error, HeapSession, OpenMode, UniType, Value};

pub fn run_example() -> uniheap::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("shared.heap");

    let writer = HeapSession::create(&path, 1 << 20, "shared", false)?;
    let cfg = writer.init_plass("Config", &fields([("port", UniType::Long)]))?;
    let mut tx = writer.atomic_begin()?;
    let c = writer.alloc_obj(&mut tx, cfg, None)?;
    writer.write_field(&mut tx, c, 0, Value::Long(8080))?;
    writer.atomic_end(tx)?;
    writer.set_root("config", c)?;

    match HeapSession::open(&path, OpenMode::ReadWrite) {
        Err(Error::LockHeld(pid)) => println!("second writer refused: held by pid {pid}"),
        other => println!("unexpected: {other:?}"),
    }
    let reader = HeapSession::open(&path, OpenMode::ReadOnly)?;
    let r = reader.get_root("config").expect("root published");
    println!("reader sees port = {:?}", reader.read_field(None, r, 0)?);

    writer.close()?;
    let again = HeapSession::open(&path, OpenMode::ReadWrite)?;
    println!("reopened, recovery: {:?}", again.recover_report());
    again.close()
}

#[allow(dead_code)]
fn main() -> uniheap::Result<()> {
    run_example()
}
