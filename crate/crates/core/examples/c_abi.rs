// The C ABI, driven from Rust the way a foreign binding would use it.

use std::ffi::{CStr, CString};
use std::ptr;

use uniheap::ffi::*;
use uniheap::UniType;

pub fn run_example() -> uniheap::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = CString::new(dir.path().join("c.heap").to_str().unwrap()).unwrap();
    let cs = |s: &str| CString::new(s).unwrap();
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(uh_create(path.as_ptr(), 1 << 20, cs("c").as_ptr(), 0, &mut s), UH_OK);

        let mut tag = 0u8;
        uh_map_type(cs("python").as_ptr(), cs("float").as_ptr(), &mut tag);
        let fname = cs("ratio");
        let names = [fname.as_ptr()];
        let mut pid = 0;
        uh_init_plass(s, cs("Ratio").as_ptr(), names.as_ptr(), [tag].as_ptr(), 1, &mut pid);

        let mut tx = ptr::null_mut();
        uh_atomic_begin(s, &mut tx);
        let mut obj = 0;
        uh_alloc_obj(tx, pid, 0, 0, &mut obj);
        // Python float maps to the 32-bit float column.
        uh_write_field(tx, obj, 0, tag, 0.5f32.to_bits() as u64);
        println!("commit -> {}", uh_atomic_end(tx));
        uh_set_root(s, cs("r").as_ptr(), obj);

        let (mut t, mut bits) = (0u8, 0u64);
        uh_read_field(s, ptr::null_mut(), obj, 0, &mut t, &mut bits);
        println!("read back tag {t} ({:?}) = {}", UniType::from_tag(t), f32::from_bits(bits as u32));

        let rc = uh_read_field(s, ptr::null_mut(), obj, 9, &mut t, &mut bits);
        println!("out of range -> {rc}: {}", CStr::from_ptr(uh_last_error()).to_string_lossy());
        uh_close(s);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> uniheap::Result<()> {
    run_example()
}
