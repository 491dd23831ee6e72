//! Scalar values stored in records and passed through transactions.
//!
//! Decimals are fixed-point with 1e-6 resolution so that state digests and
//! oracle comparisons are exact: the same arithmetic on the same inputs
//! yields bit-identical results on every partition and every run.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Number of fixed-point units per 1.0.
pub const FIXED_ONE: i64 = 1_000_000;

/// Fixed-point decimal with 1e-6 resolution, stored as an integer count of
/// micro-units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fixed(pub i64);

impl Fixed {
    pub const ZERO: Fixed = Fixed(0);
    pub const ONE: Fixed = Fixed(FIXED_ONE);

    pub fn from_int(v: i64) -> Fixed {
        Fixed(v * FIXED_ONE)
    }

    pub fn from_micros(micros: i64) -> Fixed {
        Fixed(micros)
    }

    pub fn micros(self) -> i64 {
        self.0
    }

    /// Fixed-point product, truncated toward zero. Intermediate math is done
    /// in i128 so desk-scale magnitudes cannot overflow.
    pub fn mul(self, other: Fixed) -> Fixed {
        let wide = (self.0 as i128) * (other.0 as i128) / (FIXED_ONE as i128);
        Fixed(wide as i64)
    }

    pub fn add(self, other: Fixed) -> Fixed {
        Fixed(self.0 + other.0)
    }

    pub fn sub(self, other: Fixed) -> Fixed {
        Fixed(self.0 - other.0)
    }

    /// Product with a plain integer quantity.
    pub fn mul_int(self, n: i64) -> Fixed {
        Fixed(self.0 * n)
    }
}

impl fmt::Display for Fixed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{}{}.{:06}", sign, abs / FIXED_ONE as u64, abs % FIXED_ONE as u64)
    }
}

/// A field value inside a record: integer, fixed-point decimal, or short
/// string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scalar {
    #[serde(rename = "i")]
    Int(i64),
    #[serde(rename = "d")]
    Decimal(Fixed),
    #[serde(rename = "s")]
    Text(String),
}

impl Scalar {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Scalar::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_decimal(&self) -> Option<Fixed> {
        match self {
            Scalar::Decimal(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Scalar::Text(v) => Some(v),
            _ => None,
        }
    }

    /// Canonical byte encoding used by digests and payload accounting.
    /// Length-prefixed and type-tagged so distinct values never collide.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Scalar::Int(v) => {
                out.push(b'i');
                out.extend_from_slice(&v.to_le_bytes());
            }
            Scalar::Decimal(v) => {
                out.push(b'd');
                out.extend_from_slice(&v.0.to_le_bytes());
            }
            Scalar::Text(v) => {
                out.push(b's');
                out.extend_from_slice(&(v.len() as u32).to_le_bytes());
                out.extend_from_slice(v.as_bytes());
            }
        }
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Scalar {
        Scalar::Int(v)
    }
}

impl From<Fixed> for Scalar {
    fn from(v: Fixed) -> Scalar {
        Scalar::Decimal(v)
    }
}

impl From<&str> for Scalar {
    fn from(v: &str) -> Scalar {
        Scalar::Text(v.to_string())
    }
}

impl From<String> for Scalar {
    fn from(v: String) -> Scalar {
        Scalar::Text(v)
    }
}

/// A record key: a tuple of integers whose length equals the table's
/// key arity.
pub type Key = Vec<i64>;

/// Procedure arguments and return values. `serde_json::Value` with the
/// default (sorted-map) representation gives a canonical, deterministic
/// encoding: equal values always serialize to equal bytes.
pub type Value = serde_json::Value;

/// Canonical serialized form of an argument or return value. `Value::Null`
/// encodes to zero bytes so result-free subtransactions ship empty payloads.
pub fn canonical_bytes(value: &Value) -> Vec<u8> {
    if value.is_null() {
        return Vec::new();
    }
    serde_json::to_vec(value).expect("value serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_display_and_roundtrip() {
        assert_eq!(Fixed::from_int(60).to_string(), "60.000000");
        assert_eq!(Fixed(1_234_567).to_string(), "1.234567");
        assert_eq!(Fixed(-500_000).to_string(), "-0.500000");
    }

    #[test]
    fn fixed_mul_truncates_toward_zero() {
        // 1.2 * 100 * 0.5 = 60, exactly.
        let total = Fixed::from_int(100);
        let factor = Fixed::ONE.add(Fixed(100_000)).add(Fixed(100_000));
        let pay = total.mul(factor).mul(Fixed::ONE.sub(Fixed(500_000)));
        assert_eq!(pay, Fixed::from_int(60));
        // Truncation: 0.000001 * 0.5 -> 0
        assert_eq!(Fixed(1).mul(Fixed(500_000)), Fixed(0));
    }

    #[test]
    fn scalar_encoding_distinguishes_types() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        Scalar::Int(5).encode_into(&mut a);
        Scalar::Decimal(Fixed(5)).encode_into(&mut b);
        assert_ne!(a, b);
    }

    #[test]
    fn null_payload_is_empty() {
        assert!(canonical_bytes(&Value::Null).is_empty());
        assert!(!canonical_bytes(&serde_json::json!({"x": 1})).is_empty());
    }
}
