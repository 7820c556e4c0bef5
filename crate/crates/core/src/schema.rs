//! Dataset schemas, typed values and records.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::{self, Digest};
use crate::geo::GeoPoint;
use crate::ids::RecordId;
use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    String,
    Integer,
    Float,
    Boolean,
    Timestamp,
    GeoPoint,
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::String => "string",
            FieldKind::Integer => "integer",
            FieldKind::Float => "float",
            FieldKind::Boolean => "boolean",
            FieldKind::Timestamp => "timestamp",
            FieldKind::GeoPoint => "geo_point",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "string" => FieldKind::String,
            "integer" => FieldKind::Integer,
            "float" => FieldKind::Float,
            "boolean" => FieldKind::Boolean,
            "timestamp" => FieldKind::Timestamp,
            "geo_point" => FieldKind::GeoPoint,
            _ => return None,
        })
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default)]
    pub required: bool,
}

impl FieldDef {
    pub fn required(name: impl Into<String>, kind: FieldKind) -> Self {
        FieldDef { name: name.into(), kind, required: true }
    }

    pub fn optional(name: impl Into<String>, kind: FieldKind) -> Self {
        FieldDef { name: name.into(), kind, required: false }
    }
}

/// Ordered field list. Order is significant for CSV export headers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub fields: Vec<FieldDef>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("schema has no fields")]
    Empty,
    #[error("duplicate field name `{0}`")]
    DuplicateField(String),
    #[error("field name must be non-empty")]
    EmptyFieldName,
}

/// Compact `name:kind[!]` comma list, `!` marking required fields.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("bad schema spec `{0}`")]
pub struct SchemaSpecError(pub String);

impl Schema {
    pub fn new(fields: Vec<FieldDef>) -> Result<Self, SchemaError> {
        let schema = Schema { fields };
        schema.check()?;
        Ok(schema)
    }

    pub fn check(&self) -> Result<(), SchemaError> {
        if self.fields.is_empty() {
            return Err(SchemaError::Empty);
        }
        let mut seen = BTreeSet::new();
        for f in &self.fields {
            if f.name.is_empty() {
                return Err(SchemaError::EmptyFieldName);
            }
            if !seen.insert(f.name.as_str()) {
                return Err(SchemaError::DuplicateField(f.name.clone()));
            }
        }
        Ok(())
    }

    pub fn parse_spec(spec: &str) -> Result<Self, SchemaSpecError> {
        let mut fields = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, kind) = part.split_once(':').ok_or_else(|| SchemaSpecError(part.into()))?;
            let (kind, required) = match kind.strip_suffix('!') {
                Some(k) => (k, true),
                None => (kind, false),
            };
            let kind = FieldKind::parse(kind.trim()).ok_or_else(|| SchemaSpecError(part.into()))?;
            fields.push(FieldDef { name: name.trim().into(), kind, required });
        }
        Ok(Schema { fields })
    }

    pub fn field(&self, name: &str) -> Option<&FieldDef> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn required_fields(&self) -> impl Iterator<Item = &FieldDef> {
        self.fields.iter().filter(|f| f.required)
    }

    /// Every problem with `values`, in schema order then unknown fields.
    pub fn validate(&self, values: &BTreeMap<String, Value>) -> Result<(), Vec<FieldIssue>> {
        let mut issues = Vec::new();
        for f in &self.fields {
            match values.get(&f.name) {
                None if f.required => issues.push(FieldIssue::new(&f.name, Problem::Missing)),
                None => {}
                Some(v) if v.kind() != f.kind => {
                    issues.push(FieldIssue::new(&f.name, Problem::WrongKind { expected: f.kind, found: v.kind() }))
                }
                Some(v) if !v.is_finite() => issues.push(FieldIssue::new(&f.name, Problem::NonFinite)),
                Some(_) => {}
            }
        }
        for name in values.keys() {
            if self.field(name).is_none() {
                issues.push(FieldIssue::new(name, Problem::Unknown));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldIssue {
    pub field: String,
    pub problem: Problem,
}

impl FieldIssue {
    fn new(field: &str, problem: Problem) -> Self {
        FieldIssue { field: field.into(), problem }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Problem {
    Missing,
    WrongKind { expected: FieldKind, found: FieldKind },
    NonFinite,
    Unknown,
}

impl fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.problem {
            Problem::Missing => write!(f, "required field `{}` is missing", self.field),
            Problem::WrongKind { expected, found } => {
                write!(f, "field `{}` expects {expected}, got {found}", self.field)
            }
            Problem::NonFinite => write!(f, "field `{}` is not a finite number", self.field),
            Problem::Unknown => write!(f, "field `{}` is not in the schema", self.field),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    String(String),
    Integer(i64),
    Float(f64),
    Boolean(bool),
    Timestamp(Timestamp),
    GeoPoint(GeoPoint),
}

impl Value {
    pub fn kind(&self) -> FieldKind {
        match self {
            Value::String(_) => FieldKind::String,
            Value::Integer(_) => FieldKind::Integer,
            Value::Float(_) => FieldKind::Float,
            Value::Boolean(_) => FieldKind::Boolean,
            Value::Timestamp(_) => FieldKind::Timestamp,
            Value::GeoPoint(_) => FieldKind::GeoPoint,
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Value::Float(v) => v.is_finite(),
            Value::GeoPoint(p) => p.lat.is_finite() && p.lon.is_finite(),
            _ => true,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(*v),
            Value::Integer(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::String(s) => Some(s),
            _ => None,
        }
    }

    /// Parses the textual form used by CSV cells and CLI arguments.
    /// Geo points are `lat,lon`.
    pub fn parse_as(kind: FieldKind, text: &str) -> Option<Value> {
        Some(match kind {
            FieldKind::String => Value::String(text.into()),
            FieldKind::Integer => Value::Integer(text.trim().parse().ok()?),
            FieldKind::Float => {
                let v: f64 = text.trim().parse().ok()?;
                if !v.is_finite() {
                    return None;
                }
                Value::Float(v)
            }
            FieldKind::Boolean => match text.trim() {
                "true" | "TRUE" | "True" => Value::Boolean(true),
                "false" | "FALSE" | "False" => Value::Boolean(false),
                _ => return None,
            },
            FieldKind::Timestamp => Value::Timestamp(Timestamp::parse_iso(text.trim())?),
            FieldKind::GeoPoint => {
                let (lat, lon) = text.split_once(',')?;
                Value::GeoPoint(GeoPoint { lat: lat.trim().parse().ok()?, lon: lon.trim().parse().ok()? })
            }
        })
    }

    /// Inverse of [`Value::parse_as`].
    pub fn to_text(&self) -> String {
        use alloc::format;
        match self {
            Value::String(s) => s.clone(),
            Value::Integer(v) => format!("{v}"),
            Value::Float(v) => canonical::format_number(*v),
            Value::Boolean(v) => format!("{v}"),
            Value::Timestamp(t) => t.to_iso(),
            Value::GeoPoint(p) => {
                format!("{},{}", canonical::format_number(p.lat), canonical::format_number(p.lon))
            }
        }
    }
}

/// A schema-conforming row with a content digest over its canonical form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub record_id: RecordId,
    pub values: BTreeMap<String, Value>,
    pub digest: Digest,
}

impl Record {
    pub fn new(record_id: RecordId, values: BTreeMap<String, Value>) -> Self {
        let digest = canonical::record_digest(&record_id, &values);
        Record { record_id, values, digest }
    }

    /// Builds a record whose id is derived from the given key fields.
    /// Returns `None` when a key field is absent.
    pub fn keyed(key_fields: &[String], values: BTreeMap<String, Value>) -> Option<Self> {
        let id = canonical::key_record_id(key_fields, &values)?;
        Some(Record::new(id, values))
    }

    pub fn canonical_json(&self) -> String {
        canonical::record_json(&self.record_id, &self.values)
    }

    /// True when `digest` matches the canonical serialization.
    pub fn digest_is_consistent(&self) -> bool {
        canonical::record_digest(&self.record_id, &self.values) == self.digest
    }
}
