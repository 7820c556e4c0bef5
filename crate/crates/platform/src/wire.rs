//! Plain JSON forms of typed values, used by JSON-lines files and the API.

use std::collections::BTreeMap;

use ienv_core::schema::FieldKind;
use ienv_core::{canonical, GeoPoint, Record, Schema, Timestamp, Value};
use serde_json::{json, Map, Number};

pub fn value_to_json(v: &Value) -> serde_json::Value {
    match v {
        Value::String(s) => json!(s),
        Value::Integer(i) => json!(i),
        Value::Float(f) => Number::from_f64(*f).map_or(serde_json::Value::Null, serde_json::Value::Number),
        Value::Boolean(b) => json!(b),
        Value::Timestamp(t) => json!(t.to_iso()),
        Value::GeoPoint(p) => json!({ "lat": p.lat, "lon": p.lon }),
    }
}

pub fn values_to_json(values: &BTreeMap<String, Value>) -> serde_json::Value {
    serde_json::Value::Object(values.iter().map(|(k, v)| (k.clone(), value_to_json(v))).collect())
}

/// Reads a plain JSON value as `kind`. Integers are accepted for floats.
pub fn json_to_value(kind: FieldKind, v: &serde_json::Value) -> Option<Value> {
    Some(match (kind, v) {
        (FieldKind::String, serde_json::Value::String(s)) => Value::String(s.clone()),
        (FieldKind::Integer, serde_json::Value::Number(n)) => Value::Integer(n.as_i64()?),
        (FieldKind::Float, serde_json::Value::Number(n)) => Value::Float(n.as_f64()?),
        (FieldKind::Boolean, serde_json::Value::Bool(b)) => Value::Boolean(*b),
        (FieldKind::Timestamp, serde_json::Value::String(s)) => Value::Timestamp(Timestamp::parse_iso(s)?),
        (FieldKind::Timestamp, serde_json::Value::Number(n)) => Value::Timestamp(Timestamp(n.as_i64()?)),
        (FieldKind::GeoPoint, serde_json::Value::Object(o)) => {
            Value::GeoPoint(GeoPoint { lat: o.get("lat")?.as_f64()?, lon: o.get("lon")?.as_f64()? })
        }
        (FieldKind::GeoPoint, serde_json::Value::String(s)) => Value::parse_as(FieldKind::GeoPoint, s)?,
        _ => return None,
    })
}

/// Converts an object of plain JSON values using the schema's kinds.
/// Unknown fields fall back to their natural JSON type so that schema
/// validation can name them.
pub fn json_to_values(schema: &Schema, obj: &Map<String, serde_json::Value>) -> Result<BTreeMap<String, Value>, String> {
    let mut out = BTreeMap::new();
    for (k, v) in obj {
        if v.is_null() {
            continue;
        }
        let value = match schema.field(k) {
            Some(f) => json_to_value(f.kind, v).ok_or_else(|| format!("field `{k}` expects {}", f.kind.name()))?,
            None => match v {
                serde_json::Value::String(s) => Value::String(s.clone()),
                serde_json::Value::Bool(b) => Value::Boolean(*b),
                serde_json::Value::Number(n) => match n.as_i64() {
                    Some(i) => Value::Integer(i),
                    None => Value::Float(n.as_f64().unwrap_or(f64::NAN)),
                },
                _ => return Err(format!("field `{k}` has an unsupported value")),
            },
        };
        out.insert(k.clone(), value);
    }
    Ok(out)
}

/// Text of a JSON scalar as a CSV cell would hold it.
pub fn json_cell_text(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        serde_json::Value::Number(n) => Some(match n.as_f64() {
            Some(f) if n.as_i64().is_none() => canonical::format_number(f),
            _ => n.to_string(),
        }),
        serde_json::Value::Object(o) => {
            let lat = o.get("lat")?.as_f64()?;
            let lon = o.get("lon")?.as_f64()?;
            Some(format!("{},{}", canonical::format_number(lat), canonical::format_number(lon)))
        }
        serde_json::Value::Array(_) => None,
    }
}

/// `{record_id, values, digest}` with plain JSON values.
pub fn record_to_json(r: &Record) -> serde_json::Value {
    json!({ "record_id": r.record_id, "values": values_to_json(&r.values), "digest": r.digest.to_hex() })
}
