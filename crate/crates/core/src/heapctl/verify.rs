//! Offline structural checker. Works on a raw persisted image and shares no
//! code with recovery beyond the record codecs, so it can catch recovery bugs.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layout::*;
use crate::log::{EntryKind, LogEntry, Slot};
use crate::plass::{self, Plass};
use crate::types::UniType;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub code: &'static str,
    pub location: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub violations: Vec<Violation>,
    /// Items examined per invariant class.
    pub checked: BTreeMap<&'static str, u64>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn flag(&mut self, code: &'static str, location: impl Into<String>, detail: impl Into<String>) {
        self.violations.push(Violation {
            code,
            location: location.into(),
            detail: detail.into(),
        });
    }

    fn count(&mut self, class: &'static str, n: u64) {
        *self.checked.entry(class).or_default() += n;
    }
}

struct Obj {
    plass: Plass,
    len: u64,
}

/// Checks every structural invariant of a heap image. Fails only when the
/// image is not a heap at all.
pub fn verify_image(image: &[u8]) -> Result<VerifyReport> {
    let mut rep = VerifyReport::default();
    if image.len() < HEADER_LEN || image[..8] != MAGIC {
        return Err(Error::NotAHeap);
    }
    let header = match HeapHeader::decode(image, image.len() as u64) {
        Ok(h) => h,
        Err(e) => {
            rep.flag("header", "header", e.to_string());
            return Ok(rep);
        }
    };
    rep.count("header", 1);
    if header.gc_phase != GcPhase::Idle {
        rep.flag(
            "gc-phase",
            "header.gc_phase",
            format!("collection interrupted in {:?}; open the heap to recover", header.gc_phase),
        );
    }
    let regions = header.regions;
    let epoch = header.active_epoch;
    let slice = |r: Region| &image[r.offset as usize..r.end() as usize];

    // Plasses.
    let plass_region = slice(regions.plass());
    let plasses: Vec<Plass> = if header.next_plass_offset > regions.plass().length {
        rep.flag("plass", "header.next_plass_offset", "beyond the plass region");
        Vec::new()
    } else {
        match plass::decode_region(plass_region, header.next_plass_offset as usize) {
            Ok(p) => p,
            Err(e) => {
                rep.flag("plass", "plass region", e);
                Vec::new()
            }
        }
    };
    rep.count("plasses", plasses.len() as u64);

    // Log: every slot before the recorded tail must be valid; after it, the
    // valid prefix may end in one torn slot followed only by zeros.
    let seg = regions.log(epoch);
    let seg_bytes = slice(seg);
    let cap = regions.log_capacity();
    let tail_rel = header.log_tail.checked_sub(seg.offset).filter(|&t| t <= cap);
    if tail_rel.is_none() {
        rep.flag("header", "header.log_tail", format!("{} outside the active log segment", header.log_tail));
    }
    let tail_rel = tail_rel.unwrap_or(0);
    let mut entries: Vec<(u64, LogEntry)> = Vec::new();
    let mut prefix_open = true;
    let mut pending_bad: Option<u64> = None;
    let mut pos = 0;
    while pos + ENTRY_SIZE <= cap {
        let raw = &seg_bytes[pos as usize..(pos + ENTRY_SIZE) as usize];
        let off = seg.offset + pos;
        match LogEntry::decode(raw) {
            Slot::Valid(e) => {
                rep.count("log_entries", 1);
                if let Some(bad) = pending_bad.take() {
                    rep.flag("crc", format!("log+{}", bad - seg.offset), "corrupt record followed by valid records");
                }
                if prefix_open {
                    entries.push((off, e));
                }
            }
            Slot::Empty => {
                if pos < tail_rel {
                    rep.flag("log-hole", format!("log+{pos}"), "empty slot before the recorded tail");
                }
                prefix_open = false;
            }
            Slot::Invalid => {
                if pos < tail_rel {
                    rep.flag("crc", format!("log+{pos}"), "checksum mismatch before the recorded tail");
                } else if pending_bad.is_none() {
                    pending_bad = Some(off);
                } else {
                    rep.flag("crc", format!("log+{pos}"), "second corrupt record");
                }
                prefix_open = false;
            }
        }
        pos += ENTRY_SIZE;
    }
    if seg_bytes[cap as usize..].iter().any(|&b| b != 0) {
        rep.flag("log-hole", "log segment slack", "non-zero bytes past the last whole slot");
    }

    // Transactions.
    let mut commits: HashMap<u64, u64> = HashMap::new();
    let mut counts: HashMap<u64, u64> = HashMap::new();
    for (_, e) in &entries {
        match e.kind {
            EntryKind::Commit => {
                if commits.insert(e.tx_id, e.value).is_some() {
                    rep.flag("tx", format!("tx {}", e.tx_id), "committed twice");
                }
            }
            EntryKind::Alloc | EntryKind::Update => *counts.entry(e.tx_id).or_default() += 1,
            _ => {}
        }
    }
    for (tx, want) in &commits {
        let got = counts.get(tx).copied().unwrap_or(0);
        if got != *want {
            rep.flag("tx", format!("tx {tx}"), format!("commit covers {want} records, found {got}"));
        }
    }

    // Objects and values.
    let chunks = regions.object_chunks();
    let space = slice(regions.objects(epoch));
    let header_chunk = |id: u64| {
        let o = ((id - 1) * CHUNK_SIZE) as usize;
        decode_object_header(&space[o..o + CHUNK_SIZE as usize])
    };
    let mut objects: HashMap<u64, Obj> = HashMap::new();
    let mut latest: HashMap<(u64, u32), (u8, u64)> = HashMap::new();
    for &(off, e) in &entries {
        let loc = format!("log+{}", off - seg.offset);
        let committed = commits.contains_key(&e.tx_id);
        match e.kind {
            EntryKind::Commit => {}
            EntryKind::Alloc | EntryKind::Update if !committed => {}
            EntryKind::Alloc | EntryKind::CheckpointHdr => {
                let id = e.object_id;
                if id == 0 || id > chunks {
                    rep.flag("object", loc, format!("object id {id} outside the space"));
                    continue;
                }
                let (pid, _, flags, _) = header_chunk(id);
                if e.kind == EntryKind::Alloc && pid != e.field_index {
                    rep.flag("header", format!("object {id}"), "header plass differs from ALLOC record");
                }
                let Some(p) = plasses.get((pid as usize).wrapping_sub(1)).cloned() else {
                    rep.flag("plass-ref", format!("object {id}"), format!("unknown plass {pid}"));
                    continue;
                };
                if p.is_array() != (flags & FLAG_ARRAY != 0) {
                    rep.flag("header", format!("object {id}"), "array flag disagrees with plass");
                }
                let len = if p.is_array() { e.value } else { p.fields.len() as u64 };
                if objects.insert(id, Obj { plass: p, len }).is_some() {
                    rep.flag("object", loc, format!("object {id} allocated twice"));
                }
            }
            EntryKind::Update | EntryKind::CheckpointVal | EntryKind::AtomicUpdate => {
                let Some(o) = objects.get(&e.object_id) else {
                    rep.flag("orphan-value", loc, format!("value for unallocated object {}", e.object_id));
                    continue;
                };
                if e.field_index as u64 >= o.len {
                    rep.flag("field", loc, format!("field {} beyond length {}", e.field_index, o.len));
                    continue;
                }
                let ty = o.plass.slot_type(e.field_index as usize);
                if ty.tag() != e.type_tag {
                    rep.flag("type", loc, format!("tag {} for a {} field", e.type_tag, ty));
                    continue;
                }
                latest.insert((e.object_id, e.field_index), (e.type_tag, e.value));
            }
        }
    }
    rep.count("objects", objects.len() as u64);
    for (&(id, idx), &(tag, v)) in &latest {
        if tag == UniType::Reference.tag() && v != 0 && !objects.contains_key(&v) {
            rep.flag("dangling-ref", format!("object {id} field {idx}"), format!("refers to missing object {v}"));
        }
    }
    rep.count("fields", latest.len() as u64);
    for (&id, _) in &objects {
        let (_, word, _, _) = header_chunk(id);
        if word & LOCK_BIT != 0 {
            rep.flag("lock", format!("object {id}"), "lock bit set on media");
        }
    }

    // Bitmap: a set bit needs a committed allocation.
    let bitmap = slice(regions.bitmap(epoch));
    for (byte_i, &b) in bitmap.iter().enumerate() {
        if b == 0 {
            continue;
        }
        for bit in 0..8 {
            if b & (1 << bit) == 0 {
                continue;
            }
            let id = byte_i as u64 * 8 + bit + 1;
            rep.count("bitmap_bits", 1);
            if !objects.contains_key(&id) {
                rep.flag("bitmap", format!("bit {}", id - 1), format!("object {id} has no committed allocation"));
            }
        }
    }

    // Roots.
    let bank = slice(regions.root_bank(epoch));
    let mut names = HashSet::new();
    for (i, raw) in bank.chunks_exact(ROOT_SLOT_SIZE as usize).enumerate() {
        let Some((name, addr)) = decode_root_slot(raw) else {
            continue;
        };
        rep.count("roots", 1);
        if !names.insert(name.clone()) {
            rep.flag("root-dup", format!("root slot {i}"), format!("duplicate root name {name:?}"));
        }
        if !objects.contains_key(&addr) {
            rep.flag("dangling-root", format!("root {name:?}"), format!("refers to missing object {addr}"));
        }
    }
    Ok(rep)
}
