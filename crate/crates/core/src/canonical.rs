//! Canonical JSON serialization and SHA-256 digests.
//!
//! Objects have keys sorted bytewise, no whitespace, numbers in the shortest
//! round-trip decimal form (ECMAScript `Number#toString` layout), timestamps
//! as ISO 8601 UTC with `Z`, and NFC-normalized strings.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::ids::RecordId;
use crate::schema::Value;

/// 32-byte SHA-256 content hash, hex encoded on the wire.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(text: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(text, &mut out).ok()?;
        Some(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Digest::from_hex(&text).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

/// Shortest round-trip decimal for a finite `f64`.
///
/// Integral values print without a fraction (`2`), magnitudes in
/// `[1e-6, 1e21)` print positionally, everything else uses `d.ddde±x`.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        // Validation rejects non-finite floats; keep the output total anyway.
        return "null".into();
    }
    if v < 0.0 {
        return format!("-{}", format_number(-v));
    }
    // `{:e}` yields the shortest round-trip digits as `d[.ddd]e[-]x`.
    let sci = format!("{v:e}");
    let (mantissa, exp) = sci.split_once('e').unwrap_or((&sci, "0"));
    let exp: i32 = exp.parse().unwrap_or(0);
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let k = digits.len() as i32;
    let n = exp + 1;

    let mut out = String::new();
    if k <= n && n <= 21 {
        out.push_str(&digits);
        out.extend(core::iter::repeat_n('0', (n - k) as usize));
    } else if 0 < n && n <= 21 {
        out.push_str(&digits[..n as usize]);
        out.push('.');
        out.push_str(&digits[n as usize..]);
    } else if -6 < n && n <= 0 {
        out.push_str("0.");
        out.extend(core::iter::repeat_n('0', (-n) as usize));
        out.push_str(&digits);
    } else {
        out.push_str(&digits[..1]);
        if k > 1 {
            out.push('.');
            out.push_str(&digits[1..]);
        }
        let _ = write!(out, "e{}{}", if n > 0 { "+" } else { "-" }, (n - 1).abs());
    }
    out
}

/// Appends a JSON string literal of the NFC form of `s`.
pub fn write_string(out: &mut String, s: &str) {
    out.push('"');
    for c in s.nfc() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\u{08}' => out.push_str("\\b"),
            '\u{0c}' => out.push_str("\\f"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

pub fn write_value(out: &mut String, v: &Value) {
    match v {
        Value::String(s) => write_string(out, s),
        Value::Integer(i) => {
            let _ = write!(out, "{i}");
        }
        Value::Float(f) => out.push_str(&format_number(*f)),
        Value::Boolean(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Timestamp(t) => write_string(out, &t.to_iso()),
        Value::GeoPoint(p) => {
            out.push_str("{\"lat\":");
            out.push_str(&format_number(p.lat));
            out.push_str(",\"lon\":");
            out.push_str(&format_number(p.lon));
            out.push('}');
        }
    }
}

/// Canonical object for a field map.
pub fn values_json(values: &BTreeMap<String, Value>) -> String {
    let mut out = String::new();
    write_values(&mut out, values);
    out
}

fn write_values(out: &mut String, values: &BTreeMap<String, Value>) {
    // Sort on the normalized key bytes; NFC can reorder non-ASCII names.
    let mut entries: Vec<(String, &Value)> = values.iter().map(|(k, v)| (k.nfc().collect(), v)).collect();
    entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    out.push('{');
    for (i, (k, v)) in entries.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_string(out, k);
        out.push(':');
        write_value(out, v);
    }
    out.push('}');
}

/// `{"record_id":…,"values":{…}}`, the digest input for a record.
pub fn record_json(record_id: &RecordId, values: &BTreeMap<String, Value>) -> String {
    let mut out = String::from("{\"record_id\":");
    write_string(&mut out, record_id.as_str());
    out.push_str(",\"values\":");
    write_values(&mut out, values);
    out.push('}');
    out
}

pub fn record_digest(record_id: &RecordId, values: &BTreeMap<String, Value>) -> Digest {
    Digest::of(record_json(record_id, values).as_bytes())
}

/// Record id derived from key fields: hex SHA-256 of the canonical JSON
/// array of the key values, in key order.
pub fn key_record_id(key_fields: &[String], values: &BTreeMap<String, Value>) -> Option<RecordId> {
    let mut out = String::from("[");
    for (i, k) in key_fields.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_value(&mut out, values.get(k)?);
    }
    out.push(']');
    Some(RecordId(Digest::of(out.as_bytes()).to_hex()))
}
