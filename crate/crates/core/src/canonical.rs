//! Canonical JSON encoding and SHA-256 content hashing.
//!
//! The canonical form is the hashing pre-image for every logged digest:
//! object keys sorted by byte order, UTF-8, no insignificant whitespace and
//! numbers written in plain decimal (never exponent form). Non-finite reals
//! are rejected instead of being coerced to `null`.

use serde::{Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

const NON_FINITE_MARKER: &str = "slrc:non-finite-number";

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CanonicalError {
    #[error("non-finite number in {0}")]
    NonFiniteNumber(String),
    #[error("value cannot be encoded as JSON: {0}")]
    Encode(String),
}

/// `serialize_with` helper for real-valued fields: refuses NaN and infinities.
pub fn finite<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    if value.is_finite() {
        serializer.serialize_f64(*value)
    } else {
        Err(serde::ser::Error::custom(NON_FINITE_MARKER))
    }
}

/// `serialize_with` helper for optional real-valued fields.
pub fn finite_opt<S: Serializer>(value: &Option<f64>, serializer: S) -> Result<S::Ok, S::Error> {
    match value {
        Some(v) if !v.is_finite() => Err(serde::ser::Error::custom(NON_FINITE_MARKER)),
        Some(v) => serializer.serialize_some(v),
        None => serializer.serialize_none(),
    }
}

/// Converts any serializable value into a JSON tree, mapping the
/// non-finite marker onto [`CanonicalError::NonFiniteNumber`].
pub fn to_value<T: Serialize + ?Sized>(value: &T) -> Result<Value, CanonicalError> {
    serde_json::to_value(value).map_err(|e| {
        let msg = e.to_string();
        if msg.contains(NON_FINITE_MARKER) {
            CanonicalError::NonFiniteNumber(std::any::type_name::<T>().to_string())
        } else {
            CanonicalError::Encode(msg)
        }
    })
}

/// Canonical byte encoding of a serializable value.
pub fn canonicalize<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CanonicalError> {
    let tree = to_value(value)?;
    let mut out = String::new();
    write_value(&tree, &mut out)?;
    Ok(out.into_bytes())
}

/// Canonical encoding of an already-built JSON tree.
pub fn canonical_value_bytes(value: &Value) -> Result<Vec<u8>, CanonicalError> {
    let mut out = String::new();
    write_value(value, &mut out)?;
    Ok(out.into_bytes())
}

fn write_value(value: &Value, out: &mut String) -> Result<(), CanonicalError> {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => write_number(n, out)?,
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out)?;
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_string(key, out);
                out.push(':');
                write_value(&map[key], out)?;
            }
            out.push('}');
        }
    }
    Ok(())
}

fn write_number(n: &serde_json::Number, out: &mut String) -> Result<(), CanonicalError> {
    if let Some(i) = n.as_i64() {
        write!(out, "{i}").expect("write to String");
    } else if let Some(u) = n.as_u64() {
        write!(out, "{u}").expect("write to String");
    } else {
        let f = n
            .as_f64()
            .ok_or_else(|| CanonicalError::Encode(format!("unrepresentable number {n}")))?;
        if !f.is_finite() {
            return Err(CanonicalError::NonFiniteNumber("number".into()));
        }
        // `Display` for f64 is the shortest round-trip decimal and never uses
        // an exponent; -0 collapses to 0.
        if f == 0.0 {
            out.push('0');
        } else {
            write!(out, "{f}").expect("write to String");
        }
    }
    Ok(())
}

fn write_string(s: &str, out: &mut String) {
    out.push_str(&serde_json::to_string(s).expect("strings always encode"));
}

/// Lowercase hex SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over the canonical encoding of `value`.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> Result<String, CanonicalError> {
    Ok(sha256_hex(&canonicalize(value)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_sorted_and_compact() {
        let v = json!({"b": 1, "a": [true, null, "x"], "c": {"z": 0, "y": -2}});
        let bytes = canonical_value_bytes(&v).unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            r#"{"a":[true,null,"x"],"b":1,"c":{"y":-2,"z":0}}"#
        );
    }

    #[test]
    fn floats_never_use_exponent() {
        let v = json!([1e-7, 1.5e21, 0.1, 1.0, -0.0, 0.75]);
        let s = String::from_utf8(canonical_value_bytes(&v).unwrap()).unwrap();
        assert!(!s.contains('e') && !s.contains('E'), "{s}");
        assert_eq!(s, "[0.0000001,1500000000000000000000,0.1,1,0,0.75]");
    }

    #[test]
    fn non_finite_rejected() {
        #[derive(Serialize)]
        struct P {
            #[serde(serialize_with = "finite")]
            t: f64,
        }
        assert!(matches!(
            canonicalize(&P { t: f64::NAN }),
            Err(CanonicalError::NonFiniteNumber(_))
        ));
        assert!(matches!(
            canonicalize(&P { t: f64::INFINITY }),
            Err(CanonicalError::NonFiniteNumber(_))
        ));
        assert!(canonicalize(&P { t: 0.0 }).is_ok());
    }

    #[test]
    fn unicode_is_raw_utf8() {
        let s = canonicalize(&"naïve – ok\n").unwrap();
        assert_eq!(String::from_utf8(s).unwrap(), "\"naïve – ok\\n\"");
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
