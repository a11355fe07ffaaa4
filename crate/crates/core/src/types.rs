//! Heap value types and the mapping from host-language types onto them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ObjectRef;

/// The seven field types every runtime shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum UniType {
    /// 8-bit
    Char = 1,
    /// 16-bit
    Short = 2,
    /// 32-bit
    Int = 3,
    /// 64-bit
    Long = 4,
    /// IEEE-754 binary32
    Float = 5,
    /// IEEE-754 binary64
    Double = 6,
    /// 64-bit object id
    Reference = 7,
}

impl UniType {
    pub const ALL: [UniType; 7] = [
        UniType::Char,
        UniType::Short,
        UniType::Int,
        UniType::Long,
        UniType::Float,
        UniType::Double,
        UniType::Reference,
    ];

    /// On-media type tag.
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<UniType> {
        UniType::ALL.get(tag.checked_sub(1)? as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            UniType::Char => "char",
            UniType::Short => "short",
            UniType::Int => "int",
            UniType::Long => "long",
            UniType::Float => "float",
            UniType::Double => "double",
            UniType::Reference => "reference",
        }
    }

    pub fn from_name(name: &str) -> Option<UniType> {
        UniType::ALL.iter().copied().find(|t| t.name() == name)
    }

    /// Width in bits.
    pub fn bits(self) -> u32 {
        match self {
            UniType::Char => 8,
            UniType::Short => 16,
            UniType::Int | UniType::Float => 32,
            UniType::Long | UniType::Double | UniType::Reference => 64,
        }
    }

    /// The all-zero value of this type.
    pub fn zero(self) -> Value {
        Value::from_bits(self, 0)
    }
}

impl fmt::Display for UniType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A typed field value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum Value {
    Char(u8),
    Short(i16),
    Int(i32),
    Long(i64),
    Float(f32),
    Double(f64),
    Reference(ObjectRef),
}

impl Value {
    pub fn uni_type(&self) -> UniType {
        match self {
            Value::Char(_) => UniType::Char,
            Value::Short(_) => UniType::Short,
            Value::Int(_) => UniType::Int,
            Value::Long(_) => UniType::Long,
            Value::Float(_) => UniType::Float,
            Value::Double(_) => UniType::Double,
            Value::Reference(_) => UniType::Reference,
        }
    }

    /// Widens to the 64-bit slot stored in log records. Signed integers are
    /// sign-extended; floats keep their exact bit pattern.
    pub fn to_bits(self) -> u64 {
        match self {
            Value::Char(v) => v as u64,
            Value::Short(v) => v as i64 as u64,
            Value::Int(v) => v as i64 as u64,
            Value::Long(v) => v as u64,
            Value::Float(v) => v.to_bits() as u64,
            Value::Double(v) => v.to_bits(),
            Value::Reference(r) => r.0,
        }
    }

    /// Narrows a 64-bit slot back to `ty`.
    pub fn from_bits(ty: UniType, bits: u64) -> Value {
        match ty {
            UniType::Char => Value::Char(bits as u8),
            UniType::Short => Value::Short(bits as u16 as i16),
            UniType::Int => Value::Int(bits as u32 as i32),
            UniType::Long => Value::Long(bits as i64),
            UniType::Float => Value::Float(f32::from_bits(bits as u32)),
            UniType::Double => Value::Double(f64::from_bits(bits)),
            UniType::Reference => Value::Reference(ObjectRef(bits)),
        }
    }

    /// Bit-exact equality (distinguishes NaN payloads and signed zeros).
    pub fn bit_eq(&self, other: &Value) -> bool {
        self.uni_type() == other.uni_type() && self.to_bits() == other.to_bits()
    }

    pub fn as_long(&self) -> Option<i64> {
        match *self {
            Value::Long(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_reference(&self) -> Option<ObjectRef> {
        match *self {
            Value::Reference(r) => Some(r),
            _ => None,
        }
    }
}

impl From<bool> for Value {
    /// Booleans share the char slot and store 0 or 1.
    fn from(v: bool) -> Self {
        Value::Char(v as u8)
    }
}

impl From<i16> for Value {
    fn from(v: i16) -> Self {
        Value::Short(v)
    }
}

impl From<i32> for Value {
    fn from(v: i32) -> Self {
        Value::Int(v)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Long(v)
    }
}

impl From<f32> for Value {
    fn from(v: f32) -> Self {
        Value::Float(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Double(v)
    }
}

impl From<ObjectRef> for Value {
    fn from(v: ObjectRef) -> Self {
        Value::Reference(v)
    }
}

/// Host languages with a type mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Java,
    Python,
    JavaScript,
}

impl Language {
    pub fn name(self) -> &'static str {
        match self {
            Language::Java => "java",
            Language::Python => "python",
            Language::JavaScript => "javascript",
        }
    }

    pub fn from_name(name: &str) -> Option<Language> {
        match name {
            "java" => Some(Language::Java),
            "python" => Some(Language::Python),
            "javascript" | "js" => Some(Language::JavaScript),
            _ => None,
        }
    }
}

/// Mapped host types per language. A JavaScript number may land in any
/// numeric column; `num` resolves to double unless the field is declared
/// otherwise (see [`map_js_number`]).
const JAVA: &[(&str, UniType)] = &[
    ("boolean", UniType::Char),
    ("byte", UniType::Char),
    ("char", UniType::Short),
    ("int", UniType::Int),
    ("long", UniType::Long),
    ("float", UniType::Float),
    ("double", UniType::Double),
    ("reference", UniType::Reference),
    ("array", UniType::Reference),
];

const PYTHON: &[(&str, UniType)] = &[
    ("int", UniType::Int),
    ("long", UniType::Long),
    ("float", UniType::Float),
    ("list", UniType::Reference),
    ("dict", UniType::Reference),
    ("tuple", UniType::Reference),
];

const JAVASCRIPT: &[(&str, UniType)] = &[
    ("boolean", UniType::Char),
    ("num", UniType::Double),
    ("array", UniType::Reference),
];

/// The mapping table for one language.
pub fn type_table(language: Language) -> &'static [(&'static str, UniType)] {
    match language {
        Language::Java => JAVA,
        Language::Python => PYTHON,
        Language::JavaScript => JAVASCRIPT,
    }
}

/// Maps a host-language type name onto its heap type.
pub fn map_foreign_type(language: Language, foreign_type: &str) -> Result<UniType> {
    type_table(language)
        .iter()
        .find(|(name, _)| *name == foreign_type)
        .map(|&(_, t)| t)
        .ok_or_else(|| Error::UnmappedType {
            language: language.name(),
            foreign_type: foreign_type.to_string(),
        })
}

/// JavaScript numbers may be stored in any of int, long, float or double;
/// `declared` picks the column, defaulting to double.
pub fn map_js_number(declared: Option<UniType>) -> Result<UniType> {
    match declared {
        None => Ok(UniType::Double),
        Some(t @ (UniType::Int | UniType::Long | UniType::Float | UniType::Double)) => Ok(t),
        Some(t) => Err(Error::UnmappedType {
            language: "javascript",
            foreign_type: format!("num as {t}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for t in UniType::ALL {
            assert_eq!(UniType::from_tag(t.tag()), Some(t));
            assert_eq!(UniType::from_name(t.name()), Some(t));
        }
        assert_eq!(UniType::from_tag(0), None);
        assert_eq!(UniType::from_tag(8), None);
    }

    #[test]
    fn widths() {
        let bits: Vec<u32> = UniType::ALL.iter().map(|t| t.bits()).collect();
        assert_eq!(bits, vec![8, 16, 32, 64, 32, 64, 64]);
    }

    #[test]
    fn js_number_columns() {
        assert_eq!(map_js_number(None).unwrap(), UniType::Double);
        assert_eq!(map_js_number(Some(UniType::Int)).unwrap(), UniType::Int);
        assert!(map_js_number(Some(UniType::Char)).is_err());
    }

    #[test]
    fn bool_is_char() {
        assert!(Value::from(true).bit_eq(&Value::Char(1)));
        assert!(Value::from(false).bit_eq(&Value::Char(0)));
    }

    proptest::proptest! {
        #[test]
        fn long_round_trip(v in proptest::num::i64::ANY) {
            proptest::prop_assert_eq!(Value::from_bits(UniType::Long, Value::Long(v).to_bits()), Value::Long(v));
        }

        #[test]
        fn float_bits_round_trip(b in proptest::num::u32::ANY) {
            let v = Value::Float(f32::from_bits(b));
            proptest::prop_assert!(Value::from_bits(UniType::Float, v.to_bits()).bit_eq(&v));
        }

        #[test]
        fn double_bits_round_trip(b in proptest::num::u64::ANY) {
            let v = Value::Double(f64::from_bits(b));
            proptest::prop_assert!(Value::from_bits(UniType::Double, v.to_bits()).bit_eq(&v));
        }

        #[test]
        fn small_ints_round_trip(c in proptest::num::u8::ANY, s in proptest::num::i16::ANY, i in proptest::num::i32::ANY) {
            for v in [Value::Char(c), Value::Short(s), Value::Int(i)] {
                proptest::prop_assert_eq!(Value::from_bits(v.uni_type(), v.to_bits()), v);
            }
        }
    }
}
