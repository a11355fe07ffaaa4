//! Persistent class descriptors ("plasses").
//!
//! On media a plass is `[name_len u16][name][field_count u16]` followed by
//! `[name_len u16][name][type_tag u8]` per field, zero-padded to 8 bytes.
//! Records are appended to the plass region and never rewritten; a plass id
//! is its 1-based position in the region.

use std::collections::HashMap;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::UniType;

/// Prefix of the synthetic plass names used for arrays, e.g. `[long`.
pub const ARRAY_PREFIX: char = '[';
pub const ARRAY_ELEMENT_FIELD: &str = "element";
pub const MAX_FIELDS: usize = u16::MAX as usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldDef {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: UniType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Plass {
    pub id: u32,
    pub name: String,
    pub fields: Vec<FieldDef>,
}

impl Plass {
    pub fn is_array(&self) -> bool {
        self.name.starts_with(ARRAY_PREFIX)
    }

    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    /// 0-based ordinal of a field.
    pub fn field_index(&self, field_name: &str) -> Result<usize> {
        self.fields
            .iter()
            .position(|f| f.name == field_name)
            .ok_or_else(|| Error::NotFound(field_name.to_string()))
    }

    /// Element type of an array plass.
    pub fn element_type(&self) -> Option<UniType> {
        self.is_array().then(|| self.fields[0].ty)
    }

    /// Type of slot `index` (any index maps to the element type for arrays).
    pub fn slot_type(&self, index: usize) -> UniType {
        if self.is_array() {
            self.fields[0].ty
        } else {
            self.fields[index].ty
        }
    }

    pub fn same_layout(&self, fields: &[FieldDef]) -> bool {
        self.fields == fields
    }
}

pub fn array_plass_name(element: UniType) -> String {
    format!("{ARRAY_PREFIX}{}", element.name())
}

/// Checks a user-supplied plass definition.
pub fn validate(name: &str, fields: &[FieldDef], allow_array: bool) -> Result<()> {
    if name.is_empty() || name.len() > u16::MAX as usize || name.contains('\0') {
        return Err(Error::InvalidPlass(format!("bad plass name {name:?}")));
    }
    if name.starts_with(ARRAY_PREFIX) && !allow_array {
        return Err(Error::InvalidPlass(format!(
            "plass names starting with '{ARRAY_PREFIX}' are reserved for arrays"
        )));
    }
    if fields.is_empty() || fields.len() > MAX_FIELDS {
        return Err(Error::InvalidPlass(format!(
            "plass {name:?} must have 1..={MAX_FIELDS} fields"
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for f in fields {
        if f.name.is_empty() || f.name.len() > u16::MAX as usize {
            return Err(Error::InvalidPlass(format!("bad field name {:?}", f.name)));
        }
        if !seen.insert(f.name.as_str()) {
            return Err(Error::InvalidPlass(format!("duplicate field {:?}", f.name)));
        }
    }
    Ok(())
}

pub fn encode(name: &str, fields: &[FieldDef]) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 + name.len() + fields.len() * 8);
    b.extend_from_slice(&(name.len() as u16).to_le_bytes());
    b.extend_from_slice(name.as_bytes());
    b.extend_from_slice(&(fields.len() as u16).to_le_bytes());
    for f in fields {
        b.extend_from_slice(&(f.name.len() as u16).to_le_bytes());
        b.extend_from_slice(f.name.as_bytes());
        b.push(f.ty.tag());
    }
    b.resize(b.len().div_ceil(8) * 8, 0);
    b
}

/// Decodes one record at the start of `buf`; returns it with its padded length.
pub fn decode(buf: &[u8]) -> std::result::Result<(String, Vec<FieldDef>, usize), String> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = buf
            .get(pos..pos + n)
            .ok_or_else(|| format!("record truncated at byte {pos}"))?;
        pos += n;
        Ok(s)
    };
    let u16_of = |s: &[u8]| u16::from_le_bytes([s[0], s[1]]) as usize;
    let name_len = u16_of(take(2)?);
    if name_len == 0 {
        return Err("empty plass name".into());
    }
    let name = std::str::from_utf8(take(name_len)?)
        .map_err(|_| "plass name is not UTF-8".to_string())?
        .to_string();
    let count = u16_of(take(2)?);
    if count == 0 {
        return Err(format!("plass {name:?} has no fields"));
    }
    let mut fields = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16_of(take(2)?);
        let fname = std::str::from_utf8(take(len)?)
            .map_err(|_| "field name is not UTF-8".to_string())?
            .to_string();
        let tag = take(1)?[0];
        let ty = UniType::from_tag(tag)
            .ok_or_else(|| format!("field {fname:?} has unknown type tag {tag}"))?;
        fields.push(FieldDef { name: fname, ty });
    }
    let padded = pos.div_ceil(8) * 8;
    if padded > buf.len() {
        return Err("record padding truncated".into());
    }
    Ok((name, fields, padded))
}

/// Decodes every record in `region[..used]`.
pub fn decode_region(region: &[u8], used: usize) -> std::result::Result<Vec<Plass>, String> {
    let used = region
        .get(..used)
        .ok_or_else(|| format!("plass region holds {} bytes, header says {used}", region.len()))?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < used.len() {
        let (name, fields, len) = decode(&used[pos..])
            .map_err(|e| format!("plass record at offset {pos}: {e}"))?;
        out.push(Plass {
            id: out.len() as u32 + 1,
            name,
            fields,
        });
        pos += len;
    }
    Ok(out)
}

/// In-memory index over the plass region.
#[derive(Debug, Default)]
pub(crate) struct PlassTable {
    by_id: Vec<Arc<Plass>>,
    by_name: HashMap<String, u32>,
    /// Bytes of the plass region in use.
    pub used: u64,
}

impl PlassTable {
    pub fn from_records(records: Vec<Plass>, used: u64) -> Self {
        let mut t = PlassTable {
            used,
            ..Default::default()
        };
        for p in records {
            t.by_name.insert(p.name.clone(), p.id);
            t.by_id.push(Arc::new(p));
        }
        t
    }

    pub fn get(&self, id: u32) -> Option<&Arc<Plass>> {
        self.by_id.get((id as usize).checked_sub(1)?)
    }

    pub fn lookup(&self, name: &str) -> Option<u32> {
        self.by_name.get(name).copied()
    }

    pub fn push(&mut self, name: String, fields: Vec<FieldDef>, record_len: u64) -> u32 {
        let id = self.by_id.len() as u32 + 1;
        self.by_name.insert(name.clone(), id);
        self.by_id.push(Arc::new(Plass { id, name, fields }));
        self.used += record_len;
        id
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn all(&self) -> Vec<Arc<Plass>> {
        self.by_id.clone()
    }
}

/// Shorthand for building field lists.
pub fn fields<S: Into<String>>(defs: impl IntoIterator<Item = (S, UniType)>) -> Vec<FieldDef> {
    defs.into_iter()
        .map(|(name, ty)| FieldDef {
            name: name.into(),
            ty,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_layout() {
        let b = encode("Point", &fields([("x", UniType::Long), ("y", UniType::Long)]));
        // 2+5 name, 2 count, (2+1+1)*2 fields = 17 -> padded 24
        assert_eq!(b.len(), 24);
        assert_eq!(&b[..2], &5u16.to_le_bytes());
        assert_eq!(&b[2..7], b"Point");
        assert_eq!(&b[7..9], &2u16.to_le_bytes());
        assert_eq!(&b[9..11], &1u16.to_le_bytes());
        assert_eq!(b[11], b'x');
        assert_eq!(b[12], UniType::Long.tag());
        assert!(b[17..].iter().all(|&x| x == 0));
    }

    #[test]
    fn field_ordinals() {
        let p = Plass {
            id: 1,
            name: "Point".into(),
            fields: fields([("x", UniType::Long), ("y", UniType::Long)]),
        };
        assert_eq!(p.field_index("x").unwrap(), 0);
        assert_eq!(p.field_index("y").unwrap(), 1);
        assert!(matches!(p.field_index("z"), Err(Error::NotFound(_))));

        let many: Vec<FieldDef> = (0..100)
            .map(|i| FieldDef {
                name: format!("f{i}"),
                ty: UniType::Int,
            })
            .collect();
        let p = Plass {
            id: 2,
            name: "Wide".into(),
            fields: many,
        };
        assert_eq!(p.field_index("f99").unwrap(), 99);
    }

    #[test]
    fn validation() {
        assert!(validate("P", &[], false).is_err());
        assert!(validate("", &fields([("a", UniType::Int)]), false).is_err());
        assert!(validate("P", &fields([("a", UniType::Int), ("a", UniType::Long)]), false).is_err());
        assert!(validate("[int", &fields([("element", UniType::Int)]), false).is_err());
        assert!(validate("[int", &fields([("element", UniType::Int)]), true).is_ok());
    }

    #[test]
    fn region_decode() {
        let mut region = encode("A", &fields([("a", UniType::Int)]));
        region.extend(encode("B", &fields([("b", UniType::Reference), ("c", UniType::Double)])));
        let used = region.len();
        region.resize(used + 64, 0);
        let ps = decode_region(&region, used).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[1].id, 2);
        assert_eq!(ps[1].fields[1].ty, UniType::Double);
        assert!(decode_region(&region, used + 8).is_err());
    }

    proptest::proptest! {
        #[test]
        fn codec_round_trip(name in "[A-Za-z][A-Za-z0-9_]{0,20}",
                            defs in proptest::collection::btree_map("[a-z]{1,12}", 1u8..=7, 1..20)) {
            let fs: Vec<FieldDef> = defs.into_iter().map(|(n, t)| FieldDef { name: n, ty: UniType::from_tag(t).unwrap() }).collect();
            let b = encode(&name, &fs);
            proptest::prop_assert_eq!(b.len() % 8, 0);
            let (n2, f2, len) = decode(&b).unwrap();
            proptest::prop_assert_eq!(n2, name);
            proptest::prop_assert_eq!(f2, fs);
            proptest::prop_assert_eq!(len, b.len());
        }
    }
}
