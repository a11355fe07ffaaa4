//! C ABI over [`HeapSession`].
//!
//! Every function returns an `int` status: `0` on success, `1` when a commit
//! lost to a conflict (`uh_atomic_end` only), a positive [`Error::code`] on
//! failure, and `-1` for an internal panic. A null argument is reported as
//! an invalid-name failure. The message
//! of the last failure on the calling thread is available from
//! `uh_last_error`.
//!
//! Values cross the boundary as a type tag plus the 64-bit widened bit
//! pattern used in log records. A transaction handle belongs to the thread
//! that began it.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gc::{Forwarding, VrootProvider};
use crate::object::ObjectRef;
use crate::plass::FieldDef;
use crate::session::{HeapSession, OpenMode};
use crate::tx::{CommitResult, Transaction};
use crate::types::{map_foreign_type, Language, UniType, Value};

pub const UH_OK: c_int = 0;
pub const UH_CONFLICT: c_int = 1;
pub const UH_INVALID: c_int = -1;

/// Opaque session handle.
pub struct UhSession(HeapSession);
/// Opaque transaction handle.
pub struct UhTx(Transaction);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<c_int>) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(rc)) => rc,
        Ok(Err(e)) => {
            set_error(e.to_string());
            e.code()
        }
        Err(_) => {
            set_error("internal panic".into());
            UH_INVALID
        }
    }
}

struct NullArg;

impl From<NullArg> for Error {
    fn from(_: NullArg) -> Error {
        Error::InvalidName("null argument".into())
    }
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str> {
    if p.is_null() {
        return Err(NullArg.into());
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidName("not valid UTF-8".into()))
}

unsafe fn session<'a>(p: *const UhSession) -> Result<&'a HeapSession> {
    p.as_ref().map(|s| &s.0).ok_or_else(|| NullArg.into())
}

unsafe fn tx<'a>(p: *mut UhTx) -> Result<&'a mut Transaction> {
    p.as_mut().map(|t| &mut t.0).ok_or_else(|| NullArg.into())
}

unsafe fn out<T>(p: *mut T, v: T) -> Result<()> {
    if p.is_null() {
        return Err(NullArg.into());
    }
    p.write(v);
    Ok(())
}

fn value(tag: u8, bits: u64) -> Result<Value> {
    UniType::from_tag(tag)
        .map(|t| Value::from_bits(t, bits))
        .ok_or_else(|| Error::InvalidPlass(format!("unknown type tag {tag}")))
}

/// Creates a heap file and opens a read-write session on it.
///
/// # Safety
/// `path` and `name` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uh_create(
    path: *const c_char,
    size: u64,
    name: *const c_char,
    force: c_int,
    out_session: *mut *mut UhSession,
) -> c_int {
    guard(|| {
        let s = HeapSession::create(Path::new(text(path)?), size, text(name)?, force != 0)?;
        out(out_session, Box::into_raw(Box::new(UhSession(s))))?;
        Ok(UH_OK)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_session` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uh_open(path: *const c_char, read_only: c_int, out_session: *mut *mut UhSession) -> c_int {
    guard(|| {
        let mode = if read_only != 0 {
            OpenMode::ReadOnly
        } else {
            OpenMode::ReadWrite
        };
        let s = HeapSession::open(Path::new(text(path)?), mode)?;
        out(out_session, Box::into_raw(Box::new(UhSession(s))))?;
        Ok(UH_OK)
    })
}

/// Persists header deltas and frees the session. Outstanding transactions
/// must be ended or aborted first.
///
/// # Safety
/// `s` must come from `uh_create`/`uh_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn uh_close(s: *mut UhSession) -> c_int {
    guard(|| {
        if s.is_null() {
            return Err(NullArg.into());
        }
        Box::from_raw(s).0.close()?;
        Ok(UH_OK)
    })
}

/// Defines a plass (or returns the id of an identical existing one).
///
/// # Safety
/// `names` and `types` must each hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn uh_init_plass(
    s: *const UhSession,
    name: *const c_char,
    names: *const *const c_char,
    types: *const u8,
    n: usize,
    out_id: *mut u32,
) -> c_int {
    guard(|| {
        if n > 0 && (names.is_null() || types.is_null()) {
            return Err(NullArg.into());
        }
        let mut fields = Vec::with_capacity(n);
        for i in 0..n {
            let ty = UniType::from_tag(*types.add(i))
                .ok_or_else(|| Error::InvalidPlass(format!("unknown type tag {}", *types.add(i))))?;
            fields.push(FieldDef {
                name: text(*names.add(i))?.to_string(),
                ty,
            });
        }
        let id = session(s)?.init_plass(text(name)?, &fields)?;
        out(out_id, id)?;
        Ok(UH_OK)
    })
}

/// # Safety
/// Pointers must be valid; `out_id` receives the id when found.
#[no_mangle]
pub unsafe extern "C" fn uh_exists_plass(s: *const UhSession, name: *const c_char, out_id: *mut u32) -> c_int {
    guard(|| {
        let name = text(name)?;
        let id = session(s)?
            .exists_plass(name)
            .ok_or_else(|| Error::NotFound(name.to_string()))?;
        out(out_id, id)?;
        Ok(UH_OK)
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn uh_atomic_begin(s: *const UhSession, out_tx: *mut *mut UhTx) -> c_int {
    guard(|| {
        let t = session(s)?.atomic_begin()?;
        out(out_tx, Box::into_raw(Box::new(UhTx(t))))?;
        Ok(UH_OK)
    })
}

/// Commits and frees the transaction. Returns `1` on conflict, after which
/// the caller re-runs the transaction from `uh_atomic_begin`.
///
/// # Safety
/// `t` must come from `uh_atomic_begin` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn uh_atomic_end(t: *mut UhTx) -> c_int {
    guard(|| {
        if t.is_null() {
            return Err(NullArg.into());
        }
        Ok(match Box::from_raw(t).0.atomic_end()? {
            CommitResult::Committed => UH_OK,
            CommitResult::ConflictRetry => UH_CONFLICT,
        })
    })
}

/// # Safety
/// `t` must come from `uh_atomic_begin` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn uh_abort(t: *mut UhTx) -> c_int {
    guard(|| {
        if t.is_null() {
            return Err(NullArg.into());
        }
        Box::from_raw(t).0.abort()?;
        Ok(UH_OK)
    })
}

/// Allocates an object. For array plasses pass `is_array = 1` and the length.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn uh_alloc_obj(
    t: *mut UhTx,
    plass_id: u32,
    is_array: c_int,
    array_length: u64,
    out_ref: *mut u64,
) -> c_int {
    guard(|| {
        let len = (is_array != 0).then_some(array_length);
        let r = tx(t)?.alloc_obj(plass_id, len)?;
        out(out_ref, r.0)?;
        Ok(UH_OK)
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn uh_write_field(t: *mut UhTx, obj: u64, index: u64, tag: u8, bits: u64) -> c_int {
    guard(|| {
        tx(t)?.write_field(ObjectRef(obj), index, value(tag, bits)?)?;
        Ok(UH_OK)
    })
}

/// Reads a field, through `t` when it is non-null.
///
/// # Safety
/// `s` must be valid; `t` may be null; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn uh_read_field(
    s: *const UhSession,
    t: *mut UhTx,
    obj: u64,
    index: u64,
    out_tag: *mut u8,
    out_bits: *mut u64,
) -> c_int {
    guard(|| {
        let s = session(s)?;
        let v = s.read_field(t.as_mut().map(|t| &mut t.0), ObjectRef(obj), index)?;
        out(out_tag, v.uni_type().tag())?;
        out(out_bits, v.to_bits())?;
        Ok(UH_OK)
    })
}

/// Single-field durable update outside any transaction (one fence).
///
/// # Safety
/// `s` must be valid.
#[no_mangle]
pub unsafe extern "C" fn uh_write_field_atomic(s: *const UhSession, obj: u64, index: u64, tag: u8, bits: u64) -> c_int {
    guard(|| {
        session(s)?.write_field_atomic(ObjectRef(obj), index, value(tag, bits)?)?;
        Ok(UH_OK)
    })
}

/// Binds or, with `obj = 0`, deletes a named root.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn uh_set_root(s: *const UhSession, name: *const c_char, obj: u64) -> c_int {
    guard(|| {
        session(s)?.set_root(text(name)?, ObjectRef(obj))?;
        Ok(UH_OK)
    })
}

/// Writes the root's object id, or 0 when unbound.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn uh_get_root(s: *const UhSession, name: *const c_char, out_ref: *mut u64) -> c_int {
    guard(|| {
        let r = session(s)?.get_root(text(name)?).unwrap_or(ObjectRef::NULL);
        out(out_ref, r.0)?;
        Ok(UH_OK)
    })
}

/// Runs a collection. `out_live` (nullable) receives the survivor count.
///
/// # Safety
/// `s` must be valid.
#[no_mangle]
pub unsafe extern "C" fn uh_request_gc(s: *const UhSession, out_live: *mut u64) -> c_int {
    guard(|| {
        let r = session(s)?.request_gc()?;
        if !out_live.is_null() {
            out_live.write(r.live);
        }
        Ok(UH_OK)
    })
}

/// Fills `buf` (capacity `cap`) with vroot ids and returns how many were
/// written. If the return exceeds `cap` the call is repeated with a buffer
/// of that size.
pub type UhVrootsFn = unsafe extern "C" fn(ctx: *mut c_void, buf: *mut u64, cap: usize) -> usize;
/// Receives parallel arrays of old and new ids after a collection.
pub type UhRelocatedFn = unsafe extern "C" fn(ctx: *mut c_void, old: *const u64, new: *const u64, n: usize);

struct ForeignRuntime {
    ctx: *mut c_void,
    vroots: UhVrootsFn,
    relocated: Option<UhRelocatedFn>,
}

// SAFETY: the registering caller promises the callbacks and `ctx` may be
// used from whichever thread runs the collection.
unsafe impl Send for ForeignRuntime {}
unsafe impl Sync for ForeignRuntime {}

impl VrootProvider for ForeignRuntime {
    fn vroots(&self) -> Vec<ObjectRef> {
        let mut buf = vec![0u64; 64];
        loop {
            // SAFETY: guaranteed by the registration contract.
            let n = unsafe { (self.vroots)(self.ctx, buf.as_mut_ptr(), buf.len()) };
            if n <= buf.len() {
                buf.truncate(n);
                return buf.into_iter().map(ObjectRef).collect();
            }
            buf.resize(n, 0);
        }
    }

    fn relocated(&self, forwarding: &Forwarding) {
        if let Some(f) = self.relocated {
            let (old, new): (Vec<u64>, Vec<u64>) = forwarding.pairs().map(|(o, n)| (o.0, n.0)).unzip();
            // SAFETY: guaranteed by the registration contract.
            unsafe { f(self.ctx, old.as_ptr(), new.as_ptr(), old.len()) };
        }
    }
}

/// Registers a runtime whose vroots keep objects alive across collections.
///
/// # Safety
/// The callbacks and `ctx` must stay valid until unregistration or close,
/// and be callable from any thread.
#[no_mangle]
pub unsafe extern "C" fn uh_register_runtime(
    s: *const UhSession,
    vroots: Option<UhVrootsFn>,
    relocated: Option<UhRelocatedFn>,
    ctx: *mut c_void,
    out_id: *mut u64,
) -> c_int {
    guard(|| {
        let vroots = vroots.ok_or(NullArg)?;
        let id = session(s)?.register_runtime(ForeignRuntime { ctx, vroots, relocated });
        out(out_id, id)?;
        Ok(UH_OK)
    })
}

/// # Safety
/// `s` must be valid.
#[no_mangle]
pub unsafe extern "C" fn uh_unregister_runtime(s: *const UhSession, id: u64) -> c_int {
    guard(|| {
        session(s)?.unregister_runtime(id);
        Ok(UH_OK)
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn uh_fence_count(s: *const UhSession, out_n: *mut u64) -> c_int {
    guard(|| {
        out(out_n, session(s)?.fence_count())?;
        Ok(UH_OK)
    })
}

/// Maps a host type name (`language` is "java", "python" or "javascript")
/// to a type tag.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn uh_map_type(language: *const c_char, foreign_type: *const c_char, out_tag: *mut u8) -> c_int {
    guard(|| {
        let lang = text(language)?;
        let lang = Language::from_name(lang).ok_or_else(|| Error::NotFound(lang.to_string()))?;
        out(out_tag, map_foreign_type(lang, text(foreign_type)?)?.tag())?;
        Ok(UH_OK)
    })
}

/// Message for the last failure on this thread. Valid until the next call
/// on the same thread.
#[no_mangle]
pub extern "C" fn uh_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    #[test]
    fn round_trip_through_the_c_surface() {
        let dir = tempfile::tempdir().unwrap();
        let path = c(dir.path().join("f.heap").to_str().unwrap());
        unsafe {
            let mut s = ptr::null_mut();
            assert_eq!(uh_create(path.as_ptr(), 1 << 20, c("ffi").as_ptr(), 0, &mut s), 0);
            let (n0, n1) = (c("a"), c("next"));
            let names = [n0.as_ptr(), n1.as_ptr()];
            let types = [UniType::Int.tag(), UniType::Reference.tag()];
            let mut pid = 0;
            assert_eq!(uh_init_plass(s, c("Node").as_ptr(), names.as_ptr(), types.as_ptr(), 2, &mut pid), 0);
            let mut t = ptr::null_mut();
            assert_eq!(uh_atomic_begin(s, &mut t), 0);
            let mut o = 0;
            assert_eq!(uh_alloc_obj(t, pid, 0, 0, &mut o), 0);
            assert_eq!(uh_write_field(t, o, 0, UniType::Int.tag(), (-5i64) as u64), 0);
            assert_eq!(uh_atomic_end(t), 0);
            assert_eq!(uh_set_root(s, c("head").as_ptr(), o), 0);
            assert_eq!(uh_close(s), 0);

            assert_eq!(uh_open(path.as_ptr(), 1, &mut s), 0);
            let mut r = 0;
            assert_eq!(uh_get_root(s, c("head").as_ptr(), &mut r), 0);
            let (mut tag, mut bits) = (0u8, 0u64);
            assert_eq!(uh_read_field(s, ptr::null_mut(), r, 0, &mut tag, &mut bits), 0);
            assert_eq!(Value::from_bits(UniType::from_tag(tag).unwrap(), bits), Value::Int(-5));
            let rc = uh_atomic_begin(s, &mut t);
            assert_eq!(rc, Error::ReadOnly.code());
            let msg = CStr::from_ptr(uh_last_error()).to_str().unwrap();
            assert!(msg.contains("read-only"));
            assert_eq!(uh_close(s), 0);
        }
    }

    #[test]
    fn null_and_bad_arguments() {
        unsafe {
            assert_eq!(uh_close(ptr::null_mut()), Error::InvalidName(String::new()).code());
            let mut tag = 0;
            assert_eq!(uh_map_type(c("java").as_ptr(), c("long").as_ptr(), &mut tag), 0);
            assert_eq!(tag, UniType::Long.tag());
            assert_eq!(
                uh_map_type(c("java").as_ptr(), c("String").as_ptr(), &mut tag),
                Error::UnmappedType {
                    language: "java",
                    foreign_type: String::new()
                }
                .code()
            );
        }
    }

    unsafe extern "C" fn two_roots(ctx: *mut c_void, buf: *mut u64, cap: usize) -> usize {
        let ids = &*(ctx as *const Vec<u64>);
        if cap >= ids.len() {
            ptr::copy_nonoverlapping(ids.as_ptr(), buf, ids.len());
        }
        ids.len()
    }

    #[test]
    fn foreign_vroots_survive_gc() {
        let dir = tempfile::tempdir().unwrap();
        let path = c(dir.path().join("g.heap").to_str().unwrap());
        unsafe {
            let mut s = ptr::null_mut();
            assert_eq!(uh_create(path.as_ptr(), 1 << 20, c("g").as_ptr(), 0, &mut s), 0);
            let n = c("v");
            let names = [n.as_ptr()];
            let types = [UniType::Long.tag()];
            let mut pid = 0;
            assert_eq!(uh_init_plass(s, c("L").as_ptr(), names.as_ptr(), types.as_ptr(), 1, &mut pid), 0);
            let mut ids = Vec::new();
            let mut t = ptr::null_mut();
            assert_eq!(uh_atomic_begin(s, &mut t), 0);
            for _ in 0..3 {
                let mut o = 0;
                assert_eq!(uh_alloc_obj(t, pid, 0, 0, &mut o), 0);
                ids.push(o);
            }
            assert_eq!(uh_atomic_end(t), 0);
            let keep: Vec<u64> = vec![ids[1], ids[2]];
            let mut rid = 0;
            assert_eq!(
                uh_register_runtime(s, Some(two_roots), None, &keep as *const _ as *mut c_void, &mut rid),
                0
            );
            let mut live = 0;
            assert_eq!(uh_request_gc(s, &mut live), 0);
            assert_eq!(live, 2);
            assert_eq!(uh_unregister_runtime(s, rid), 0);
            assert_eq!(uh_close(s), 0);
        }
    }
}
