use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Prefecture-level city code: the first four digits of an NBS
/// administrative code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CityId(u32);

impl CityId {
    pub const fn new(code: u32) -> Self {
        Self(code)
    }

    /// Normalizes county- or district-level codes to their prefecture prefix.
    /// Codes of four digits or fewer are taken as they are.
    pub fn from_code(code: &str) -> Result<Self, String> {
        let digits = code.trim();
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("`{code}` is not a numeric city code"));
        }
        let prefix = if digits.len() > 4 { &digits[..4] } else { digits };
        prefix.parse::<u32>().map(Self).map_err(|e| e.to_string())
    }

    pub fn code(self) -> u32 {
        self.0
    }
}

impl fmt::Display for CityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for CityId {
    fn from(code: u32) -> Self {
        Self(code)
    }
}

impl Serialize for CityId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u32(self.0)
    }
}

impl<'de> Deserialize<'de> for CityId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => CityId::from_code(&n.to_string()).map_err(serde::de::Error::custom),
            Raw::Text(s) => CityId::from_code(&s).map_err(serde::de::Error::custom),
        }
    }
}
