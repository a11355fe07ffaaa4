//! On-media heap layout.
//!
//! ```text
//! 0        header (4 KiB)
//!          plass region
//!          root table (two banks of 32-byte slots, one per epoch parity)
//!          object space A | object space B      16-byte header chunks
//!          bitmap A       | bitmap B            1 bit per chunk
//!          log segment A  | log segment B       40-byte entries
//! ```
//!
//! The even/odd parity of `active_epoch` selects one object space, bitmap,
//! log segment and root bank. Everything is little-endian.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pmem::LINE_SIZE;

pub const MAGIC: [u8; 8] = *b"UNIHEAP\0";
pub const VERSION: u32 = 1;

pub const HEADER_REGION: u64 = 4096;
pub const HEAP_NAME_LEN: usize = 32;
pub const CHUNK_SIZE: u64 = 16;
pub const ENTRY_SIZE: u64 = 40;
pub const ROOT_SLOT_SIZE: u64 = 32;
pub const ROOT_NAME_LEN: usize = 24;
pub const DEFAULT_ROOT_SLOTS: u64 = 128;
pub const DEFAULT_PLASS_BYTES: u64 = 256 * 1024;

// Header field offsets.
pub const OFF_MAGIC: u64 = 0;
pub const OFF_VERSION: u64 = 8;
pub const OFF_NAME: u64 = 16;
pub const OFF_HEAP_SIZE: u64 = 48;
pub const OFF_REGIONS: u64 = 56;
pub const OFF_ACTIVE_EPOCH: u64 = 184;
pub const OFF_GC_PHASE: u64 = 192;
pub const OFF_NEXT_HEADER_INDEX: u64 = 200;
pub const OFF_NEXT_PLASS_OFFSET: u64 = 208;
pub const OFF_LOG_TAIL: u64 = 216;
pub const OFF_GC_EPOCH: u64 = 224;
pub const HEADER_LEN: usize = 232;

const REGION_COUNT: usize = 8;

fn align_up(v: u64, a: u64) -> u64 {
    v.div_ceil(a) * a
}

fn align_down(v: u64, a: u64) -> u64 {
    v / a * a
}

/// Collector progress recorded in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GcPhase {
    Idle = 0,
    Marking = 1,
    Relocation = 2,
    Compaction = 3,
    Cleanup = 4,
}

impl GcPhase {
    pub fn from_u64(v: u64) -> Option<GcPhase> {
        Some(match v {
            0 => GcPhase::Idle,
            1 => GcPhase::Marking,
            2 => GcPhase::Relocation,
            3 => GcPhase::Compaction,
            4 => GcPhase::Cleanup,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Region {
    pub offset: u64,
    pub length: u64,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.offset + self.length
    }

    fn overlaps(&self, other: &Region) -> bool {
        self.offset < other.end() && other.offset < self.end()
    }
}

/// Region sizes. The default splits the space left after the header, plass
/// region and root table 1/8 to each object space and the rest to the log
/// segments after carving out the bitmaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Geometry {
    pub plass_bytes: u64,
    pub root_slots: u64,
    pub object_chunks: u64,
    pub log_bytes: u64,
}

impl Geometry {
    pub fn for_capacity(capacity: u64) -> Geometry {
        let plass_bytes = if capacity >= 1 << 20 {
            DEFAULT_PLASS_BYTES
        } else {
            align_down(capacity / 16, LINE_SIZE as u64).max(4096)
        };
        let roots = 2 * DEFAULT_ROOT_SLOTS * ROOT_SLOT_SIZE;
        let remaining = capacity.saturating_sub(HEADER_REGION + plass_bytes + roots);
        let space = align_down(remaining / 8, LINE_SIZE as u64);
        let object_chunks = space / CHUNK_SIZE;
        let bitmap = Self::bitmap_bytes(object_chunks);
        let log_bytes = align_down(
            remaining.saturating_sub(2 * space + 2 * bitmap) / 2,
            LINE_SIZE as u64,
        );
        Geometry {
            plass_bytes,
            root_slots: DEFAULT_ROOT_SLOTS,
            object_chunks,
            log_bytes,
        }
    }

    fn bitmap_bytes(chunks: u64) -> u64 {
        align_up(chunks.div_ceil(8).max(1), LINE_SIZE as u64)
    }

    /// Total bytes this geometry occupies, header included.
    pub fn required_bytes(&self) -> u64 {
        self.regions().iter().map(Region::end).max().unwrap_or(0)
    }

    pub fn regions(&self) -> RegionTable {
        let line = LINE_SIZE as u64;
        let mut cursor = HEADER_REGION;
        let mut take = |len: u64| {
            let r = Region {
                offset: cursor,
                length: len,
            };
            cursor = align_up(cursor + len, line);
            r
        };
        let plass = take(align_up(self.plass_bytes, 8));
        let roots = take(2 * self.root_slots * ROOT_SLOT_SIZE);
        let space = self.object_chunks * CHUNK_SIZE;
        let obj_a = take(space);
        let obj_b = take(space);
        let bitmap = Self::bitmap_bytes(self.object_chunks);
        let bm_a = take(bitmap);
        let bm_b = take(bitmap);
        let log_a = take(self.log_bytes);
        let log_b = take(self.log_bytes);
        RegionTable([plass, roots, obj_a, obj_b, log_a, log_b, bm_a, bm_b])
    }
}

/// Region table in on-media order: plass, roots, object A/B, log A/B, bitmap A/B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegionTable(pub [Region; REGION_COUNT]);

pub const REGION_NAMES: [&str; REGION_COUNT] = [
    "plass", "roots", "objects_a", "objects_b", "log_a", "log_b", "bitmap_a", "bitmap_b",
];

impl RegionTable {
    pub fn iter(&self) -> impl Iterator<Item = &Region> {
        self.0.iter()
    }

    pub fn plass(&self) -> Region {
        self.0[0]
    }

    pub fn roots(&self) -> Region {
        self.0[1]
    }

    pub fn objects(&self, epoch: u64) -> Region {
        self.0[2 + (epoch & 1) as usize]
    }

    pub fn log(&self, epoch: u64) -> Region {
        self.0[4 + (epoch & 1) as usize]
    }

    pub fn bitmap(&self, epoch: u64) -> Region {
        self.0[6 + (epoch & 1) as usize]
    }

    pub fn root_slots(&self) -> u64 {
        self.roots().length / 2 / ROOT_SLOT_SIZE
    }

    /// The root bank used while `epoch` is active.
    pub fn root_bank(&self, epoch: u64) -> Region {
        let r = self.roots();
        let bank = r.length / 2;
        Region {
            offset: r.offset + (epoch & 1) * bank,
            length: bank,
        }
    }

    pub fn object_chunks(&self) -> u64 {
        self.objects(0).length / CHUNK_SIZE
    }

    /// Usable bytes in a log segment (whole entries only).
    pub fn log_capacity(&self) -> u64 {
        align_down(self.log(0).length, ENTRY_SIZE)
    }

    fn validate(&self, heap_size: u64) -> Result<()> {
        for (i, r) in self.0.iter().enumerate() {
            if r.offset < HEADER_REGION || r.end() > heap_size {
                return Err(Error::CorruptHeader(format!(
                    "region {} [{}, {}) outside heap of {} bytes",
                    REGION_NAMES[i],
                    r.offset,
                    r.end(),
                    heap_size
                )));
            }
            for (j, o) in self.0.iter().enumerate().skip(i + 1) {
                if r.length > 0 && o.length > 0 && r.overlaps(o) {
                    return Err(Error::CorruptHeader(format!(
                        "regions {} and {} overlap",
                        REGION_NAMES[i], REGION_NAMES[j]
                    )));
                }
            }
        }
        if self.objects(0).length != self.objects(1).length
            || self.log(0).length != self.log(1).length
            || self.bitmap(0).length != self.bitmap(1).length
        {
            return Err(Error::CorruptHeader("paired regions differ in size".into()));
        }
        if self.bitmap(0).length * 8 < self.object_chunks() {
            return Err(Error::CorruptHeader("bitmap too small".into()));
        }
        if self.roots().length % (2 * ROOT_SLOT_SIZE) != 0 {
            return Err(Error::CorruptHeader("root table size".into()));
        }
        Ok(())
    }
}

/// Decoded heap header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HeapHeader {
    pub version: u32,
    pub heap_name: String,
    pub heap_size: u64,
    pub regions: RegionTable,
    pub active_epoch: u64,
    pub gc_phase: GcPhase,
    pub next_header_index: u64,
    pub next_plass_offset: u64,
    pub log_tail: u64,
    /// Epoch that was active when the current collection started.
    pub gc_epoch: u64,
}

fn u64_at(b: &[u8], off: u64) -> u64 {
    let o = off as usize;
    u64::from_le_bytes(b[o..o + 8].try_into().unwrap())
}

impl HeapHeader {
    pub fn new(name: &str, heap_size: u64, geometry: &Geometry) -> HeapHeader {
        let regions = geometry.regions();
        HeapHeader {
            version: VERSION,
            heap_name: name.to_string(),
            heap_size,
            regions,
            active_epoch: 0,
            gc_phase: GcPhase::Idle,
            next_header_index: 0,
            next_plass_offset: 0,
            log_tail: regions.log(0).offset,
            gc_epoch: 0,
        }
    }

    /// Encodes everything but the magic, which is written last on creation.
    pub fn encode_body(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[OFF_VERSION as usize..][..4].copy_from_slice(&self.version.to_le_bytes());
        let name = self.heap_name.as_bytes();
        b[OFF_NAME as usize..][..name.len()].copy_from_slice(name);
        let mut put = |off: u64, v: u64| {
            b[off as usize..][..8].copy_from_slice(&v.to_le_bytes());
        };
        put(OFF_HEAP_SIZE, self.heap_size);
        for (i, r) in self.regions.iter().enumerate() {
            put(OFF_REGIONS + 16 * i as u64, r.offset);
            put(OFF_REGIONS + 16 * i as u64 + 8, r.length);
        }
        put(OFF_ACTIVE_EPOCH, self.active_epoch);
        put(OFF_GC_PHASE, self.gc_phase as u64);
        put(OFF_NEXT_HEADER_INDEX, self.next_header_index);
        put(OFF_NEXT_PLASS_OFFSET, self.next_plass_offset);
        put(OFF_LOG_TAIL, self.log_tail);
        put(OFF_GC_EPOCH, self.gc_epoch);
        b
    }

    /// Decodes and validates a header image against the device size.
    pub fn decode(b: &[u8], device_size: u64) -> Result<HeapHeader> {
        if b.len() < HEADER_LEN || b[..8] != MAGIC {
            return Err(Error::NotAHeap);
        }
        let version = u32::from_le_bytes(b[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let raw_name = &b[OFF_NAME as usize..OFF_NAME as usize + HEAP_NAME_LEN];
        let end = raw_name.iter().position(|&c| c == 0).unwrap_or(HEAP_NAME_LEN);
        let heap_name = std::str::from_utf8(&raw_name[..end])
            .map_err(|_| Error::CorruptHeader("heap name is not UTF-8".into()))?
            .to_string();
        let heap_size = u64_at(b, OFF_HEAP_SIZE);
        if heap_size > device_size {
            return Err(Error::CorruptHeader(format!(
                "heap size {heap_size} exceeds device size {device_size}"
            )));
        }
        let mut regions = [Region::default(); REGION_COUNT];
        for (i, r) in regions.iter_mut().enumerate() {
            r.offset = u64_at(b, OFF_REGIONS + 16 * i as u64);
            r.length = u64_at(b, OFF_REGIONS + 16 * i as u64 + 8);
        }
        let regions = RegionTable(regions);
        regions.validate(heap_size)?;
        let phase = u64_at(b, OFF_GC_PHASE);
        let gc_phase = GcPhase::from_u64(phase)
            .ok_or_else(|| Error::CorruptHeader(format!("unknown gc phase {phase}")))?;
        Ok(HeapHeader {
            version,
            heap_name,
            heap_size,
            regions,
            active_epoch: u64_at(b, OFF_ACTIVE_EPOCH),
            gc_phase,
            next_header_index: u64_at(b, OFF_NEXT_HEADER_INDEX),
            next_plass_offset: u64_at(b, OFF_NEXT_PLASS_OFFSET),
            log_tail: u64_at(b, OFF_LOG_TAIL),
            gc_epoch: u64_at(b, OFF_GC_EPOCH),
        })
    }
}

/// Encodes a 16-byte object header chunk.
pub fn encode_object_header(plass_id: u32, lock_word: u32, flags: u32) -> [u8; 16] {
    let mut b = [0u8; 16];
    b[0..4].copy_from_slice(&plass_id.to_le_bytes());
    b[4..8].copy_from_slice(&lock_word.to_le_bytes());
    b[8..12].copy_from_slice(&flags.to_le_bytes());
    b
}

/// Decoded object header chunk: `(plass_id, lock_word, flags, reserved)`.
pub fn decode_object_header(b: &[u8]) -> (u32, u32, u32, u32) {
    let w = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
    (w(0), w(4), w(8), w(12))
}

pub const FLAG_ARRAY: u32 = 1;
pub const LOCK_BIT: u32 = 1 << 31;
pub const VERSION_MASK: u32 = !LOCK_BIT;

/// Encodes a root slot: NUL-padded 24-byte name followed by the object id.
pub fn encode_root_slot(name: &str, addr: u64) -> [u8; ROOT_SLOT_SIZE as usize] {
    let mut b = [0u8; ROOT_SLOT_SIZE as usize];
    b[..name.len()].copy_from_slice(name.as_bytes());
    b[ROOT_NAME_LEN..].copy_from_slice(&addr.to_le_bytes());
    b
}

/// Decodes a root slot; `None` for an empty slot.
pub fn decode_root_slot(b: &[u8]) -> Option<(String, u64)> {
    let addr = u64::from_le_bytes(b[ROOT_NAME_LEN..ROOT_NAME_LEN + 8].try_into().unwrap());
    if addr == 0 {
        return None;
    }
    let end = b[..ROOT_NAME_LEN]
        .iter()
        .position(|&c| c == 0)
        .unwrap_or(ROOT_NAME_LEN);
    Some((String::from_utf8_lossy(&b[..end]).into_owned(), addr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_fits_and_is_disjoint() {
        for cap in [256 * 1024u64, 1 << 20, 8 << 20, 64 << 20] {
            let g = Geometry::for_capacity(cap);
            assert!(g.required_bytes() <= cap, "cap {cap}: {g:?}");
            let t = g.regions();
            t.validate(cap).unwrap();
            assert_eq!(t.root_slots(), 128);
            assert!(g.log_bytes > 2 * g.object_chunks * CHUNK_SIZE);
        }
    }

    #[test]
    fn one_mib_defaults() {
        let g = Geometry::for_capacity(1 << 20);
        assert_eq!(g.plass_bytes, 256 * 1024);
        assert_eq!(g.root_slots, 128);
        // (1 MiB - 4 KiB - 256 KiB - 8 KiB) / 8, rounded to a line
        assert_eq!(g.object_chunks * 16, 96_768);
    }

    #[test]
    fn header_round_trip() {
        let g = Geometry::for_capacity(1 << 20);
        let mut h = HeapHeader::new("test", 1 << 20, &g);
        h.active_epoch = 3;
        h.gc_phase = GcPhase::Compaction;
        h.next_header_index = 17;
        let mut img = vec![0u8; HEADER_LEN];
        img.copy_from_slice(&h.encode_body());
        assert!(matches!(
            HeapHeader::decode(&img, 1 << 20),
            Err(Error::NotAHeap)
        ));
        img[..8].copy_from_slice(&MAGIC);
        assert_eq!(HeapHeader::decode(&img, 1 << 20).unwrap(), h);
        img[8] = 9;
        assert!(matches!(
            HeapHeader::decode(&img, 1 << 20),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn mutable_fields_are_word_aligned() {
        for off in [
            OFF_ACTIVE_EPOCH,
            OFF_GC_PHASE,
            OFF_NEXT_HEADER_INDEX,
            OFF_NEXT_PLASS_OFFSET,
            OFF_LOG_TAIL,
            OFF_GC_EPOCH,
        ] {
            assert_eq!(off % 8, 0);
        }
    }

    #[test]
    fn overlapping_regions_rejected() {
        let g = Geometry::for_capacity(1 << 20);
        let mut h = HeapHeader::new("x", 1 << 20, &g);
        h.regions.0[3] = h.regions.0[2];
        let mut img = h.encode_body().to_vec();
        img[..8].copy_from_slice(&MAGIC);
        assert!(matches!(
            HeapHeader::decode(&img, 1 << 20),
            Err(Error::CorruptHeader(_))
        ));
    }

    #[test]
    fn root_slot_codec() {
        let b = encode_root_slot("db", 42);
        assert_eq!(decode_root_slot(&b), Some(("db".to_string(), 42)));
        assert_eq!(decode_root_slot(&encode_root_slot("db", 0)), None);
    }

    #[test]
    fn bank_follows_parity() {
        let t = Geometry::for_capacity(1 << 20).regions();
        assert_eq!(t.root_bank(0).offset, t.roots().offset);
        assert_eq!(t.root_bank(1).offset, t.roots().offset + 4096);
        assert_eq!(t.root_bank(2), t.root_bank(0));
        assert_ne!(t.objects(0), t.objects(1));
        assert_eq!(t.log(1), t.log(3));
    }
}
