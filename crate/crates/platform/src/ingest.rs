//! Source registration, import plans, idempotent import and export.

use std::collections::BTreeMap;
use std::time::Duration;

use ienv_core::access::Action;
use ienv_core::lineage::ActivityKind;
use ienv_core::predicate::{Attrs, Scalar};
use ienv_core::schema::FieldKind;
use ienv_core::{canonical, DatasetId, PlanId, PrincipalId, Record, Schema, SourceId, Timestamp, Value};
use serde::{Deserialize, Serialize};

use crate::auth::{authorize, check_in};
use crate::catalog::{dataset_resource, VersionSel};
use crate::error::{Error, Result};
use crate::platform::Platform;
use crate::wire;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFormat {
    Csv,
    JsonLines,
}

impl SourceFormat {
    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "csv" => Some(SourceFormat::Csv),
            "json-lines" | "jsonl" => Some(SourceFormat::JsonLines),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Reads the cell as the target field's kind.
    #[default]
    Identity,
    ToFloat,
    ToInt,
    /// strftime-style format, e.g. `%Y-%m-%d`.
    ParseTimestamp(String),
    /// Strips surrounding whitespace, then reads as the field's kind.
    Trim,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMapping {
    pub column: String,
    pub field: String,
    #[serde(default)]
    pub transform: Transform,
}

impl FieldMapping {
    pub fn new(column: &str, field: &str, transform: Transform) -> Self {
        FieldMapping { column: column.into(), field: field.into(), transform }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewSource {
    /// File path, `file://` URL or HTTP(S) URL.
    pub uri: String,
    pub format: SourceFormat,
    pub field_map: Vec<FieldMapping>,
    pub key_fields: Vec<String>,
    pub target_dataset_id: DatasetId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub source_id: SourceId,
    pub uri: String,
    pub format: SourceFormat,
    pub field_map: Vec<FieldMapping>,
    pub key_fields: Vec<String>,
    pub target_dataset_id: DatasetId,
    pub registered_by: PrincipalId,
    pub registered_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "step")]
pub enum PlanStep {
    Fetch { uri: String },
    Parse { format: SourceFormat },
    Map { field_map: Vec<FieldMapping> },
    Validate { dataset_id: DatasetId },
    Dedup { key_fields: Vec<String> },
    Upsert { dataset_id: DatasetId },
}

impl PlanStep {
    pub fn name(&self) -> &'static str {
        match self {
            PlanStep::Fetch { .. } => "fetch",
            PlanStep::Parse { .. } => "parse",
            PlanStep::Map { .. } => "map",
            PlanStep::Validate { .. } => "validate",
            PlanStep::Dedup { .. } => "dedup",
            PlanStep::Upsert { .. } => "upsert",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestPlan {
    pub plan_id: PlanId,
    pub source_id: SourceId,
    pub steps: Vec<PlanStep>,
    pub generated_at: Timestamp,
}

impl IngestPlan {
    fn step<T>(&self, pick: impl Fn(&PlanStep) -> Option<T>) -> Result<T> {
        self.steps.iter().find_map(pick).ok_or_else(|| Error::InvalidSource(format!("plan {} is incomplete", self.plan_id)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejected {
    /// 1-based data row; the CSV header is not counted.
    pub row: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub plan_id: PlanId,
    pub fetched: usize,
    pub inserted: usize,
    pub updated: usize,
    pub unchanged: usize,
    pub rejected: Vec<Rejected>,
    pub new_version: Option<u64>,
}

/// Raw rows as column → cell text.
type Row = BTreeMap<String, String>;

fn fetch(uri: &str) -> Result<Vec<u8>> {
    let failed = |detail: String| Error::FetchFailed { uri: uri.into(), detail };
    if uri.starts_with("http://") || uri.starts_with("https://") {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build();
        let resp = match agent.get(uri).call() {
            Ok(resp) => resp,
            Err(ureq::Error::Status(code, _)) => return Err(failed(format!("status {code}"))),
            Err(e) => return Err(failed(e.to_string())),
        };
        if resp.status() != 200 {
            return Err(failed(format!("status {}", resp.status())));
        }
        let mut buf = Vec::new();
        std::io::Read::read_to_end(&mut resp.into_reader(), &mut buf).map_err(|e| failed(e.to_string()))?;
        Ok(buf)
    } else {
        let path = uri.strip_prefix("file://").unwrap_or(uri);
        std::fs::read(path).map_err(|e| failed(e.to_string()))
    }
}

/// Splits a file into rows. File-level problems abort; malformed rows
/// come back as `Err` with their reason.
fn parse(bytes: &[u8], format: SourceFormat) -> Result<Vec<std::result::Result<Row, String>>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::ParseFailed { row: 0, detail: format!("not UTF-8: {e}") })?;
    match format {
        SourceFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
            let header: Vec<String> = rdr
                .headers()
                .map_err(|e| Error::ParseFailed { row: 0, detail: e.to_string() })?
                .iter()
                .map(str::to_owned)
                .collect();
            if header.is_empty() || header.iter().all(String::is_empty) {
                return Err(Error::ParseFailed { row: 0, detail: "missing header row".into() });
            }
            let mut rows = Vec::new();
            for rec in rdr.records() {
                rows.push(match rec {
                    Ok(r) if r.len() == header.len() => Ok(header.iter().cloned().zip(r.iter().map(str::to_owned)).collect()),
                    Ok(r) => Err(format!("expected {} columns, found {}", header.len(), r.len())),
                    Err(e) => Err(e.to_string()),
                });
            }
            Ok(rows)
        }
        SourceFormat::JsonLines => Ok(text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| match serde_json::from_str::<serde_json::Value>(line) {
                Ok(serde_json::Value::Object(o)) => {
                    Ok(o.iter().filter_map(|(k, v)| Some((k.clone(), wire::json_cell_text(v)?))).collect())
                }
                Ok(_) => Err("line is not a JSON object".into()),
                Err(e) => Err(format!("invalid JSON: {e}")),
            })
            .collect()),
    }
}

fn apply_transform(t: &Transform, kind: FieldKind, cell: &str) -> std::result::Result<Option<Value>, String> {
    let text = match t {
        Transform::Trim => cell.trim(),
        _ => cell,
    };
    if text.is_empty() && kind != FieldKind::String {
        return Ok(None);
    }
    let value = match t {
        Transform::Identity | Transform::Trim => Value::parse_as(kind, text),
        Transform::ToFloat => text.trim().parse::<f64>().ok().filter(|v| v.is_finite()).map(Value::Float),
        Transform::ToInt => text.trim().parse::<i64>().ok().map(Value::Integer),
        Transform::ParseTimestamp(fmt) => Timestamp::parse_with_format(text.trim(), fmt).map(Value::Timestamp),
    };
    let what = match t {
        Transform::ToFloat => "float".to_owned(),
        Transform::ToInt => "integer".to_owned(),
        Transform::ParseTimestamp(fmt) => format!("timestamp `{fmt}`"),
        _ => kind.name().to_owned(),
    };
    value.map(Some).ok_or_else(|| format!("cannot parse `{cell}` as {what}"))
}

fn map_row(row: &Row, map: &[FieldMapping], schema: &Schema) -> std::result::Result<BTreeMap<String, Value>, String> {
    let mut values = BTreeMap::new();
    for m in map {
        let Some(cell) = row.get(&m.column) else {
            return Err(format!("column `{}` is absent", m.column));
        };
        let kind = schema.field(&m.field).map(|f| f.kind).ok_or_else(|| format!("field `{}` is not in the schema", m.field))?;
        match apply_transform(&m.transform, kind, cell) {
            Ok(Some(v)) => {
                values.insert(m.field.clone(), v);
            }
            Ok(None) => {}
            Err(e) => return Err(format!("column `{}`: {e}", m.column)),
        }
    }
    Ok(values)
}

impl Platform {
    pub fn register_source(&self, new: NewSource, actor: &PrincipalId) -> Result<SourceId> {
        self.transact(|tx| {
            let entry = tx.st.dataset(&new.target_dataset_id)?;
            authorize(tx.st, tx.cfg, actor, Action::Write, &dataset_resource(&new.target_dataset_id))?;
            let schema = &entry.descriptor.schema;
            if new.uri.trim().is_empty() {
                return Err(Error::InvalidSource("uri must be non-empty".into()));
            }
            let mut mapped = std::collections::BTreeSet::new();
            for m in &new.field_map {
                if schema.field(&m.field).is_none() {
                    return Err(Error::InvalidSource(format!("field `{}` is not in the schema", m.field)));
                }
                if !mapped.insert(m.field.as_str()) {
                    return Err(Error::InvalidSource(format!("field `{}` is mapped twice", m.field)));
                }
            }
            if let Some(f) = schema.required_fields().find(|f| !mapped.contains(f.name.as_str())) {
                return Err(Error::UnmappedRequiredField(f.name.clone()));
            }
            if new.key_fields.is_empty() {
                return Err(Error::InvalidSource("key_fields must be non-empty".into()));
            }
            if let Some(k) = new.key_fields.iter().find(|k| !mapped.contains(k.as_str())) {
                return Err(Error::InvalidSource(format!("key field `{k}` is not mapped")));
            }
            let id = SourceId::new(tx.next_id("src"));
            tx.st.sources.insert(
                id.clone(),
                SourceDescriptor {
                    source_id: id.clone(),
                    uri: new.uri,
                    format: new.format,
                    field_map: new.field_map,
                    key_fields: new.key_fields,
                    target_dataset_id: new.target_dataset_id,
                    registered_by: actor.clone(),
                    registered_at: tx.now,
                },
            );
            Ok(id)
        })
    }

    /// Sources whose target dataset `actor` may read.
    pub fn list_sources(&self, actor: &PrincipalId) -> Vec<SourceDescriptor> {
        let st = self.read();
        st.sources
            .values()
            .filter(|s| check_in(&st, self.config(), actor, Action::Read, &dataset_resource(&s.target_dataset_id)).allowed)
            .cloned()
            .collect()
    }

    pub fn source(&self, id: &SourceId) -> Result<SourceDescriptor> {
        self.read().sources.get(id).cloned().ok_or_else(|| Error::UnknownSource(id.to_string()))
    }

    /// The fixed six-step pipeline for a source; stored for re-runs.
    pub fn generate_plan(&self, source: &SourceId) -> Result<IngestPlan> {
        self.transact(|tx| {
            let s = tx.st.sources.get(source).ok_or_else(|| Error::UnknownSource(source.to_string()))?.clone();
            let plan = IngestPlan {
                plan_id: PlanId::new(tx.next_id("plan")),
                source_id: s.source_id.clone(),
                steps: vec![
                    PlanStep::Fetch { uri: s.uri.clone() },
                    PlanStep::Parse { format: s.format },
                    PlanStep::Map { field_map: s.field_map.clone() },
                    PlanStep::Validate { dataset_id: s.target_dataset_id.clone() },
                    PlanStep::Dedup { key_fields: s.key_fields.clone() },
                    PlanStep::Upsert { dataset_id: s.target_dataset_id.clone() },
                ],
                generated_at: tx.now,
            };
            tx.st.plans.insert(plan.plan_id.clone(), plan.clone());
            Ok(plan)
        })
    }

    pub fn plan(&self, id: &PlanId) -> Result<IngestPlan> {
        self.read().plans.get(id).cloned().ok_or_else(|| Error::UnknownPlan(id.to_string()))
    }

    /// Fetches, maps, validates and deduplicates rows, then upserts the
    /// changed ones as one new version.
    pub fn run_import(&self, plan_id: &PlanId, actor: &PrincipalId) -> Result<ImportReport> {
        let plan = self.plan(plan_id)?;
        let uri = plan.step(|s| match s {
            PlanStep::Fetch { uri } => Some(uri.clone()),
            _ => None,
        })?;
        let format = plan.step(|s| match s {
            PlanStep::Parse { format } => Some(*format),
            _ => None,
        })?;
        let field_map = plan.step(|s| match s {
            PlanStep::Map { field_map } => Some(field_map.clone()),
            _ => None,
        })?;
        let key_fields = plan.step(|s| match s {
            PlanStep::Dedup { key_fields } => Some(key_fields.clone()),
            _ => None,
        })?;
        let dataset = plan.step(|s| match s {
            PlanStep::Upsert { dataset_id } => Some(dataset_id.clone()),
            _ => None,
        })?;
        {
            let st = self.read();
            st.dataset(&dataset)?;
            authorize(&st, self.config(), actor, Action::Write, &dataset_resource(&dataset))?;
        }
        let started = self.now();
        let bytes = fetch(&uri)?;
        let rows = parse(&bytes, format)?;
        let _slot = self.lock_writers([&dataset]);
        self.transact(|tx| {
            let entry = tx.st.dataset(&dataset)?;
            authorize(tx.st, tx.cfg, actor, Action::Write, &dataset_resource(&dataset))?;
            let schema = &entry.descriptor.schema;
            let head = entry.head();
            let mut report = ImportReport {
                plan_id: plan_id.clone(),
                fetched: rows.len(),
                inserted: 0,
                updated: 0,
                unchanged: 0,
                rejected: vec![],
                new_version: None,
            };
            let mut seen: BTreeMap<ienv_core::RecordId, usize> = BTreeMap::new();
            let mut index = head.record_index.clone();
            let mut fresh: Vec<Record> = Vec::new();
            for (i, row) in rows.iter().enumerate() {
                let n = i + 1;
                let reject = |reason: String| Rejected { row: n, reason };
                let values = match row.as_ref().map_err(Clone::clone).and_then(|r| map_row(r, &field_map, schema)) {
                    Ok(v) => v,
                    Err(e) => {
                        report.rejected.push(reject(e));
                        continue;
                    }
                };
                if let Err(issues) = schema.validate(&values) {
                    let text = issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
                    report.rejected.push(reject(text));
                    continue;
                }
                let Some(id) = canonical::key_record_id(&key_fields, &values) else {
                    report.rejected.push(reject("key field missing".into()));
                    continue;
                };
                if let Some(first) = seen.get(&id) {
                    report.rejected.push(reject(format!("duplicate key of row {first}")));
                    continue;
                }
                seen.insert(id.clone(), n);
                let record = Record::new(id.clone(), values);
                match head.record_index.get(&id) {
                    Some(d) if *d == record.digest => report.unchanged += 1,
                    Some(_) => report.updated += 1,
                    None => report.inserted += 1,
                }
                if head.record_index.get(&id) != Some(&record.digest) {
                    index.insert(id, record.digest);
                    fresh.push(record);
                }
            }
            if report.inserted + report.updated > 0 {
                let mut params = Attrs::new();
                params.insert("source_id".into(), Scalar::Str(plan.source_id.0.clone()));
                params.insert("plan_id".into(), Scalar::Str(plan_id.0.clone()));
                params.insert("fetched".into(), Scalar::Num(report.fetched as f64));
                params.insert("rejected".into(), Scalar::Num(report.rejected.len() as f64));
                let extra: Attrs = [
                    ("source_id".to_string(), Scalar::Str(plan.source_id.0.clone())),
                    ("inserted".to_string(), Scalar::Num(report.inserted as f64)),
                    ("updated".to_string(), Scalar::Num(report.updated as f64)),
                ]
                .into_iter()
                .collect();
                let v = tx.commit_version(&dataset, index, fresh, ActivityKind::Import, actor, vec![], params, started, extra)?;
                report.new_version = Some(v);
            }
            Ok(report)
        })
    }

    /// Deterministic export ordered by record id. CSV columns follow the
    /// schema; JSON lines hold plain values.
    pub fn export_dataset(
        &self,
        dataset: &DatasetId,
        version: VersionSel,
        format: SourceFormat,
        actor: &PrincipalId,
    ) -> Result<Vec<u8>> {
        let (schema, records) = {
            let st = self.read();
            let entry = st.dataset(dataset)?;
            authorize(&st, self.config(), actor, Action::Read, &dataset_resource(dataset))?;
            let v = st.resolve(dataset, version)?;
            (entry.descriptor.schema.clone(), st.snapshot(dataset, v)?)
        };
        let mut out = Vec::new();
        match format {
            SourceFormat::Csv => {
                let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut out);
                let header: Vec<&str> = schema.fields.iter().map(|f| f.name.as_str()).collect();
                w.write_record(&header).map_err(|e| Error::Storage(e.to_string()))?;
                for r in records.values() {
                    let row: Vec<String> =
                        schema.fields.iter().map(|f| r.values.get(&f.name).map(Value::to_text).unwrap_or_default()).collect();
                    w.write_record(&row).map_err(|e| Error::Storage(e.to_string()))?;
                }
                w.flush().map_err(|e| Error::Storage(e.to_string()))?;
            }
            SourceFormat::JsonLines => {
                for r in records.values() {
                    serde_json::to_writer(&mut out, &wire::values_to_json(&r.values))
                        .map_err(|e| Error::Storage(e.to_string()))?;
                    out.push(b'\n');
                }
            }
        }
        Ok(out)
    }
}
