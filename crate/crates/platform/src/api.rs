//! HTTP+JSON gateway under `/v1`. Every response is an envelope
//! `{ok, data | error, request_id}`.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use ienv_core::catalog::{AlgorithmKind, DatasetDescriptor};
use ienv_core::jobs::Backend;
use ienv_core::lineage::{Direction, EntityKind, EntityRef};
use ienv_core::overlay::MergeStrategy;
use ienv_core::predicate::Predicate;
use ienv_core::{AlgoId, DatasetId, GeoRegion, JobId, PlanId, PrincipalId, ProjectId, SourceId, Timestamp, WorkingSetId};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::auth::{NewPrincipal, PolicyRequest};
use crate::catalog::{DatasetFilter, NewDataset, RecordInput, VersionSel};
use crate::compute::{JobInput, JobSpec};
use crate::error::{Error, ErrorFamily, Result};
use crate::ingest::{NewSource, SourceFormat};
use crate::models::SimulateRequest;
use crate::notify::Channel;
use crate::platform::Platform;
use crate::wire;
use crate::workingset::{ChangeSet, Pin};

pub const DEFAULT_LIMIT: usize = 100;
pub const MAX_LIMIT: usize = 1000;

#[derive(Clone)]
struct App {
    platform: Platform,
    requests: Arc<AtomicU64>,
}

type Params = Query<HashMap<String, String>>;

pub fn status_for(e: &Error) -> StatusCode {
    match e.family() {
        ErrorFamily::Forbidden => StatusCode::FORBIDDEN,
        ErrorFamily::Unauthenticated => StatusCode::UNAUTHORIZED,
        ErrorFamily::NotFound => StatusCode::NOT_FOUND,
        ErrorFamily::Validation => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorFamily::Conflict => StatusCode::CONFLICT,
        ErrorFamily::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn envelope(request_id: &str, result: Result<Json>) -> Response {
    let (status, body) = match result {
        Ok(data) => (StatusCode::OK, json!({ "ok": true, "data": data, "request_id": request_id })),
        Err(e) => {
            let status = status_for(&e);
            if status == StatusCode::INTERNAL_SERVER_ERROR {
                log::error!("{request_id}: {e}");
            }
            let error = json!({ "code": e.code(), "message": e.to_string(), "detail": e.detail() });
            (status, json!({ "ok": false, "error": error, "request_id": request_id }))
        }
    };
    let mut resp = (status, axum::Json(body)).into_response();
    if let Ok(v) = HeaderValue::from_str(request_id) {
        resp.headers_mut().insert("x-request-id", v);
    }
    resp
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Auth {
    /// Anonymous callers proceed as the anonymous principal.
    Optional,
    /// A valid bearer token must be present.
    Required,
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let raw = headers.get("authorization")?.to_str().ok()?;
    let token = raw.strip_prefix("Bearer ").or_else(|| raw.strip_prefix("bearer "))?;
    Some(token.trim().to_owned())
}

impl App {
    async fn call<F>(&self, headers: &HeaderMap, auth: Auth, f: F) -> Response
    where
        F: FnOnce(&Platform, PrincipalId) -> Result<Json> + Send + 'static,
    {
        let n = self.requests.fetch_add(1, Ordering::Relaxed) + 1;
        let request_id = format!("req-{n:08x}");
        let platform = self.platform.clone();
        let token = bearer(headers);
        let result = tokio::task::spawn_blocking(move || {
            let actor = match token {
                Some(t) => platform.session_principal(&t)?,
                None if auth == Auth::Required => return Err(Error::Unauthenticated),
                None => PrincipalId::anonymous(),
            };
            f(&platform, actor)
        })
        .await
        .unwrap_or_else(|e| Err(Error::Storage(format!("handler failed: {e}"))));
        let resp = envelope(&request_id, result);
        log::info!("{request_id} {}", resp.status().as_u16());
        resp
    }
}

fn to_json<T: Serialize>(v: T) -> Result<Json> {
    serde_json::to_value(v).map_err(|e| Error::Storage(e.to_string()))
}

fn body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let bytes = if bytes.iter().all(u8::is_ascii_whitespace) { b"{}".as_slice() } else { bytes };
    serde_json::from_slice(bytes).map_err(|e| Error::InvalidInput(format!("request body: {e}")))
}

fn param<'a>(q: &'a HashMap<String, String>, key: &str) -> Option<&'a str> {
    q.get(key).map(String::as_str).filter(|s| !s.is_empty())
}

fn parse_limit(q: &HashMap<String, String>, default: usize) -> Result<usize> {
    match param(q, "limit") {
        None => Ok(default),
        Some(s) => match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::InvalidInput(format!("limit `{s}` must be a positive integer"))),
            Ok(n) => Ok(n.min(MAX_LIMIT)),
        },
    }
}

/// Cursor pagination over items sorted by `key`: returns items after the
/// cursor, at most `limit`, and the cursor of the next page.
fn paginate<T: Serialize>(items: Vec<T>, key: impl Fn(&T) -> String, q: &HashMap<String, String>) -> Result<Json> {
    let limit = parse_limit(q, DEFAULT_LIMIT)?;
    let cursor = param(q, "cursor");
    let mut rest: Vec<T> = items.into_iter().filter(|i| cursor.is_none_or(|c| key(i).as_str() > c)).collect();
    let more = rest.len() > limit;
    rest.truncate(limit);
    let next = if more { rest.last().map(&key) } else { None };
    Ok(json!({ "items": to_json(rest)?, "next_cursor": next }))
}

pub fn parse_bbox(text: &str) -> Result<GeoRegion> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidInput(format!("bbox `{text}` must be min_lon,min_lat,max_lon,max_lat")))?;
    let [min_lon, min_lat, max_lon, max_lat] = parts[..] else {
        return Err(Error::InvalidInput(format!("bbox `{text}` needs four numbers")));
    };
    let r = GeoRegion { min_lon, min_lat, max_lon, max_lat };
    if !r.is_valid() {
        return Err(Error::InvalidInput(format!("bbox `{text}` has min > max")));
    }
    Ok(r)
}

fn parse_time(text: &str) -> Result<Timestamp> {
    Timestamp::parse_iso(text).ok_or_else(|| Error::InvalidInput(format!("`{text}` is not an ISO 8601 time")))
}

fn parse_filter(q: &HashMap<String, String>) -> Result<Option<Predicate>> {
    param(q, "filter").map(Predicate::parse).transpose().map_err(Error::from)
}

/// A dataset bounding box as a GeoJSON polygon feature.
pub fn geojson_feature(d: &DatasetDescriptor) -> Json {
    let r = d.region;
    json!({
        "type": "Feature",
        "id": d.dataset_id,
        "bbox": [r.min_lon, r.min_lat, r.max_lon, r.max_lat],
        "geometry": {
            "type": "Polygon",
            "coordinates": [[
                [r.min_lon, r.min_lat], [r.max_lon, r.min_lat], [r.max_lon, r.max_lat],
                [r.min_lon, r.max_lat], [r.min_lon, r.min_lat]
            ]]
        },
        "properties": {
            "dataset_id": d.dataset_id,
            "name": d.name,
            "project_id": d.project_id,
            "study_type": d.study_type.label,
            "study_type_code": d.study_type.code,
        }
    })
}

/// ChangeSet with records in canonical serialization.
pub fn changeset_json(cs: &ChangeSet) -> Json {
    let parse = |r: &ienv_core::Record| -> Json { serde_json::from_str(&r.canonical_json()).unwrap_or(Json::Null) };
    let map: serde_json::Map<String, Json> = cs
        .iter()
        .map(|(ds, c)| {
            let v = json!({
                "added": c.added.iter().map(parse).collect::<Vec<_>>(),
                "modified": c.modified.iter().map(|m| json!({
                    "record_id": m.record_id,
                    "old_digest": m.old_digest,
                    "new_digest": m.new_digest,
                    "record": parse(&m.record),
                })).collect::<Vec<_>>(),
                "deleted": c.deleted,
            });
            (ds.0.clone(), v)
        })
        .collect();
    Json::Object(map)
}

pub fn router(platform: Platform) -> Router {
    let app = App { platform, requests: Arc::new(AtomicU64::new(0)) };
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(login))
        .route("/projects", get(list_projects).post(create_project))
        .route("/datasets", get(list_datasets).post(create_dataset))
        .route("/datasets/{id}", get(get_dataset))
        .route("/datasets/{id}/records", get(read_records).post(append_records))
        .route("/datasets/{id}/export", get(export))
        .route("/sources", get(list_sources).post(register_source))
        .route("/sources/{id}/plan", post(generate_plan))
        .route("/sources/{id}/import", post(run_import))
        .route("/working-sets", get(list_working_sets).post(create_working_set))
        .route("/working-sets/{id}", get(get_working_set).delete(discard))
        .route("/working-sets/{id}/records", get(ws_read).post(ws_write))
        .route("/working-sets/{id}/diff", get(ws_diff))
        .route("/working-sets/{id}/merge", post(merge))
        .route("/subscriptions", get(list_subscriptions).post(subscribe))
        .route("/events/feed", get(feed))
        .route("/jobs", get(list_jobs).post(submit))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/cancel", post(cancel))
        .route("/provenance/lineage", get(lineage))
        .route("/provenance/cumulative", get(cumulative))
        .route("/algorithms", get(list_algorithms))
        .route("/models/watershed/simulate", post(simulate))
        .route("/dashboard/{project_id}", get(dashboard))
        .route("/admin/principals", post(add_principal))
        .route("/admin/policies", post(grant))
        .route("/admin/backends", get(list_backends).post(register_backend));
    Router::new().nest("/v1", v1).fallback(not_found).method_not_allowed_fallback(method_not_allowed).with_state(app)
}

async fn not_found() -> Response {
    let e = json!({ "code": "not_found", "message": "no such endpoint", "detail": null });
    (StatusCode::NOT_FOUND, axum::Json(json!({ "ok": false, "error": e, "request_id": "req-none" }))).into_response()
}

async fn method_not_allowed() -> Response {
    let e = json!({ "code": "method_not_allowed", "message": "method not allowed", "detail": null });
    (StatusCode::METHOD_NOT_ALLOWED, axum::Json(json!({ "ok": false, "error": e, "request_id": "req-none" }))).into_response()
}

async fn health(State(app): State<App>, headers: HeaderMap) -> Response {
    app.call(&headers, Auth::Optional, |_, _| Ok(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))).await
}

#[derive(Deserialize)]
struct LoginBody {
    name: String,
    secret: String,
}

async fn login(State(app): State<App>, headers: HeaderMap, raw: Bytes) -> Response {
    app.call(&headers, Auth::Optional, move |p, _| {
        let b: LoginBody = body(&raw)?;
        to_json(p.authenticate(&b.name, &b.secret)?)
    })
    .await
}

async fn list_projects(State(app): State<App>, headers: HeaderMap, Query(q): Params) -> Response {
    app.call(&headers, Auth::Optional, move |p, actor| paginate(p.list_projects(&actor), |x| x.project_id.0.clone(), &q)).await
}

#[derive(Deserialize)]
struct ProjectBody {
    name: String,
    #[serde(default)]
    description: String,
}

async fn create_project(State(app): State<App>, headers: HeaderMap, raw: Bytes) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let b: ProjectBody = body(&raw)?;
        to_json(p.create_project(&b.name, &b.description, &actor)?)
    })
    .await
}

async fn list_datasets(State(app): State<App>, headers: HeaderMap, Query(q): Params) -> Response {
    app.call(&headers, Auth::Optional, move |p, actor| {
        let filter = DatasetFilter {
            project_id: param(&q, "project").or(param(&q, "project_id")).map(ProjectId::from),
            study_type: param(&q, "study_type").map(str::to_owned),
            bbox: param(&q, "bbox").map(parse_bbox).transpose()?,
        };
        let items = p.list_datasets(&filter, &actor);
        if param(&q, "format") == Some("geojson") {
            let features: Vec<Json> = items.iter().map(geojson_feature).collect();
            return Ok(json!({ "type": "FeatureCollection", "features": features }));
        }
        paginate(items, |d| d.dataset_id.0.clone(), &q)
    })
    .await
}

async fn create_dataset(State(app): State<App>, headers: HeaderMap, raw: Bytes) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let new: NewDataset = body(&raw)?;
        to_json(p.create_dataset(new, &actor)?)
    })
    .await
}

async fn get_dataset(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    app.call(&headers, Auth::Optional, move |p, actor| {
        let (d, head) = p.dataset(&DatasetId::new(id), &actor)?;
        Ok(json!({ "descriptor": to_json(&d)?, "head_version": head, "geojson": geojson_feature(&d) }))
    })
    .await
}

fn version_param(q: &HashMap<String, String>) -> Result<VersionSel> {
    param(q, "version").unwrap_or("head").parse()
}

async fn read_records(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>, Query(q): Params) -> Response {
    app.call(&headers, Auth::Optional, move |p, actor| {
        let filter = parse_filter(&q)?;
        let records = p.read_records(&DatasetId::new(id), version_param(&q)?, filter.as_ref(), &actor)?;
        let items: Vec<Json> = records.iter().map(wire::record_to_json).collect();
        paginate(items, |r| r["record_id"].as_str().unwrap_or_default().to_owned(), &q)
    })
    .await
}

#[derive(Deserialize)]
struct PlainRecord {
    #[serde(default)]
    record_id: Option<String>,
    values: serde_json::Map<String, Json>,
}

fn plain_records(p: &Platform, dataset: &DatasetId, actor: &PrincipalId, recs: Vec<PlainRecord>) -> Result<Vec<RecordInput>> {
    let (desc, _) = p.dataset(dataset, actor)?;
    recs.into_iter()
        .map(|r| {
            let values = wire::json_to_values(&desc.schema, &r.values).map_err(Error::InvalidInput)?;
            Ok(RecordInput { record_id: r.record_id.map(Into::into), values })
        })
        .collect()
}

#[derive(Deserialize)]
struct AppendBody {
    base_version: u64,
    records: Vec<PlainRecord>,
}

async fn append_records(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>, raw: Bytes) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let b: AppendBody = body(&raw)?;
        let ds = DatasetId::new(id);
        let records = plain_records(p, &ds, &actor, b.records)?;
        to_json(p.append_records(&ds, b.base_version, records, &actor)?)
    })
    .await
}

fn format_param(q: &HashMap<String, String>) -> Result<SourceFormat> {
    let f = param(q, "format").unwrap_or("csv");
    SourceFormat::parse(f).ok_or_else(|| Error::InvalidInput(format!("format `{f}` must be csv or json-lines")))
}

async fn export(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>, Query(q): Params) -> Response {
    app.call(&headers, Auth::Optional, move |p, actor| {
        let format = format_param(&q)?;
        let bytes = p.export_dataset(&DatasetId::new(id), version_param(&q)?, format, &actor)?;
        let content = String::from_utf8(bytes).map_err(|e| Error::Storage(e.to_string()))?;
        Ok(json!({ "format": format, "content": content }))
    })
    .await
}

async fn list_sources(State(app): State<App>, headers: HeaderMap, Query(q): Params) -> Response {
    app.call(&headers, Auth::Optional, move |p, actor| paginate(p.list_sources(&actor), |s| s.source_id.0.clone(), &q)).await
}

async fn register_source(State(app): State<App>, headers: HeaderMap, raw: Bytes) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let new: NewSource = body(&raw)?;
        Ok(json!({ "source_id": p.register_source(new, &actor)? }))
    })
    .await
}

async fn generate_plan(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    app.call(&headers, Auth::Required, move |p, _| to_json(p.generate_plan(&SourceId::new(id))?)).await
}

#[derive(Deserialize, Default)]
struct ImportBody {
    #[serde(default)]
    plan_id: Option<PlanId>,
}

async fn run_import(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>, raw: Bytes) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let b: ImportBody = body(&raw)?;
        let source = SourceId::new(id);
        let plan = match b.plan_id {
            Some(plan) => {
                if p.plan(&plan)?.source_id != source {
                    return Err(Error::InvalidInput(format!("plan {plan} belongs to another source")));
                }
                plan
            }
            None => p.generate_plan(&source)?.plan_id,
        };
        to_json(p.run_import(&plan, &actor)?)
    })
    .await
}

async fn list_working_sets(State(app): State<App>, headers: HeaderMap, Query(q): Params) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| paginate(p.list_working_sets(&actor), |w| w.ws_id.0.clone(), &q)).await
}

#[derive(Deserialize)]
struct WsBody {
    pins: Vec<PinBody>,
}

#[derive(Deserialize)]
struct PinBody {
    dataset_id: DatasetId,
    #[serde(default)]
    version: Option<u64>,
}

async fn create_working_set(State(app): State<App>, headers: HeaderMap, raw: Bytes) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let b: WsBody = body(&raw)?;
        let mut pins = Vec::with_capacity(b.pins.len());
        for pin in b.pins {
            let version = match pin.version {
                Some(v) => v,
                None => p.dataset(&pin.dataset_id, &actor)?.1,
            };
            pins.push(Pin { dataset_id: pin.dataset_id, version });
        }
        to_json(p.create_working_set(pins, &actor)?)
    })
    .await
}

async fn get_working_set(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| to_json(p.working_set(&WorkingSetId::new(id), &actor)?)).await
}

async fn discard(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        p.discard(&WorkingSetId::new(id.clone()), &actor)?;
        Ok(json!({ "ws_id": id, "state": "discarded" }))
    })
    .await
}

async fn ws_read(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>, Query(q): Params) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let ds = param(&q, "dataset")
            .or(param(&q, "dataset_id"))
            .ok_or_else(|| Error::InvalidInput("`dataset` is required".into()))?;
        let filter = parse_filter(&q)?;
        let records = p.ws_read(&WorkingSetId::new(id), &DatasetId::from(ds), filter.as_ref(), &actor)?;
        let items: Vec<Json> = records.iter().map(wire::record_to_json).collect();
        paginate(items, |r| r["record_id"].as_str().unwrap_or_default().to_owned(), &q)
    })
    .await
}

#[derive(Deserialize)]
struct WsWriteBody {
    dataset_id: DatasetId,
    ops: Vec<PlainOp>,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
enum PlainOp {
    Upsert {
        #[serde(default)]
        record_id: Option<String>,
        values: serde_json::Map<String, Json>,
    },
    Delete {
        record_id: String,
    },
}

async fn ws_write(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>, raw: Bytes) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let b: WsWriteBody = body(&raw)?;
        let ws = WorkingSetId::new(id);
        let schema = {
            let w = p.working_set(&ws, &actor)?;
            if w.pin(&b.dataset_id).is_none() {
                return Err(Error::InvalidInput(format!("`{}` is not pinned in {ws}", b.dataset_id)));
            }
            p.read().dataset(&b.dataset_id)?.descriptor.schema.clone()
        };
        let mut ops = Vec::with_capacity(b.ops.len());
        for op in b.ops {
            ops.push(match op {
                PlainOp::Upsert { record_id, values } => crate::workingset::WsOp::Upsert {
                    record: RecordInput {
                        record_id: record_id.map(Into::into),
                        values: wire::json_to_values(&schema, &values).map_err(Error::InvalidInput)?,
                    },
                },
                PlainOp::Delete { record_id } => crate::workingset::WsOp::Delete { record_id: record_id.into() },
            });
        }
        Ok(changeset_json(&p.ws_write(&ws, &b.dataset_id, ops, &actor)?))
    })
    .await
}

async fn ws_diff(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| Ok(changeset_json(&p.diff(&WorkingSetId::new(id), &actor)?))).await
}

#[derive(Deserialize)]
struct MergeBody {
    #[serde(default = "abort")]
    strategy: MergeStrategy,
}

fn abort() -> MergeStrategy {
    MergeStrategy::AbortOnConflict
}

async fn merge(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>, raw: Bytes) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let b: MergeBody = body(&raw)?;
        to_json(p.merge(&WorkingSetId::new(id), b.strategy, &actor)?)
    })
    .await
}

async fn list_subscriptions(State(app): State<App>, headers: HeaderMap, Query(q): Params) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| paginate(p.subscriptions(&actor), |s| s.sub_id.0.clone(), &q)).await
}

#[derive(Deserialize)]
struct SubscribeBody {
    predicate: String,
    #[serde(default = "feed_channel")]
    channel: Channel,
}

fn feed_channel() -> Channel {
    Channel::Feed
}

async fn subscribe(State(app): State<App>, headers: HeaderMap, raw: Bytes) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let b: SubscribeBody = body(&raw)?;
        Ok(json!({ "sub_id": p.subscribe(&actor, &b.predicate, b.channel)? }))
    })
    .await
}

async fn feed(State(app): State<App>, headers: HeaderMap, Query(q): Params) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let since = match param(&q, "since") {
            Some(s) => s.parse().map_err(|_| Error::InvalidInput(format!("since `{s}` must be an event id")))?,
            None => 0,
        };
        let entries = p.feed(&actor, since, parse_limit(&q, DEFAULT_LIMIT)?);
        let next = entries.last().map_or(since, |e| e.event.event_id);
        Ok(json!({ "items": to_json(entries)?, "next_since": next }))
    })
    .await
}

async fn list_jobs(State(app): State<App>, headers: HeaderMap, Query(q): Params) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| paginate(p.list_jobs(&actor), |j| j.job_id.0.clone(), &q)).await
}

#[derive(Deserialize)]
struct SubmitBody {
    #[serde(default)]
    algo_id: Option<AlgoId>,
    #[serde(default)]
    algo_name: Option<String>,
    #[serde(default)]
    algo_version: Option<String>,
    inputs: Vec<JobInput>,
    #[serde(default)]
    params: serde_json::Map<String, Json>,
    #[serde(default)]
    backend_hint: Option<String>,
    #[serde(default)]
    priority: u32,
}

async fn submit(State(app): State<App>, headers: HeaderMap, raw: Bytes) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let b: SubmitBody = body(&raw)?;
        let entry = match (&b.algo_id, &b.algo_name) {
            (Some(id), _) => p.algorithm(id)?,
            (None, Some(name)) => {
                p.algorithm_by_name(name, b.algo_version.as_deref()).ok_or_else(|| Error::UnknownAlgorithm(name.clone()))?
            }
            (None, None) => return Err(Error::InvalidInput("algo_id or algo_name is required".into())),
        };
        let params = wire::json_to_values(&entry.param_schema, &b.params).map_err(Error::InvalidInput)?;
        let spec =
            JobSpec { algo_id: entry.algo_id, inputs: b.inputs, params, backend_hint: b.backend_hint, priority: b.priority };
        Ok(json!({ "job_id": p.submit(spec, &actor)? }))
    })
    .await
}

async fn job_status(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| to_json(p.status(&JobId::new(id), &actor)?)).await
}

async fn cancel(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| to_json(p.cancel(&JobId::new(id), &actor)?)).await
}

async fn lineage(State(app): State<App>, headers: HeaderMap, Query(q): Params) -> Response {
    app.call(&headers, Auth::Optional, move |p, actor| {
        let kind_text = param(&q, "kind").unwrap_or("dataset_version");
        let kind =
            EntityKind::parse(kind_text).ok_or_else(|| Error::InvalidInput(format!("unknown entity kind `{kind_text}`")))?;
        let id = param(&q, "id").ok_or_else(|| Error::InvalidInput("`id` is required".into()))?;
        let version = param(&q, "version")
            .map(|v| v.parse::<u64>().map_err(|_| Error::InvalidInput(format!("version `{v}` must be a number"))))
            .transpose()?;
        let root = EntityRef { kind, id: id.to_owned(), version };
        let direction = match param(&q, "direction").unwrap_or("upstream") {
            "upstream" => Direction::Upstream,
            "downstream" => Direction::Downstream,
            other => return Err(Error::InvalidInput(format!("direction `{other}` must be upstream or downstream"))),
        };
        let depth = param(&q, "depth")
            .map(|d| d.parse::<usize>().map_err(|_| Error::InvalidInput(format!("depth `{d}` must be a number"))))
            .transpose()?;
        let l = p.lineage(&root, direction, depth, &actor)?;
        Ok(json!({
            "root": l.root,
            "direction": l.direction,
            "nodes": l.nodes,
            "adjacency": l.adjacency(),
            "activities": l.activities,
            "dot": l.to_dot(),
        }))
    })
    .await
}

async fn cumulative(State(app): State<App>, headers: HeaderMap, Query(q): Params) -> Response {
    app.call(&headers, Auth::Optional, move |p, actor| {
        let region = match param(&q, "bbox") {
            Some(b) => parse_bbox(b)?,
            None => GeoRegion::world(),
        };
        let from = param(&q, "from").map(parse_time).transpose()?;
        let to = param(&q, "to").map(parse_time).transpose()?;
        let algo = param(&q, "algo").filter(|a| *a != "any");
        to_json(p.cumulative_results(&region, algo, (from, to), &actor))
    })
    .await
}

async fn list_algorithms(State(app): State<App>, headers: HeaderMap, Query(q): Params) -> Response {
    app.call(&headers, Auth::Optional, move |p, _| {
        let kind = match param(&q, "kind") {
            None => None,
            Some("model") => Some(AlgorithmKind::Model),
            Some("analysis") => Some(AlgorithmKind::Analysis),
            Some("ingest-plan") => Some(AlgorithmKind::IngestPlan),
            Some(other) => return Err(Error::InvalidInput(format!("unknown algorithm kind `{other}`"))),
        };
        paginate(p.list_algorithms(kind), |a| a.algo_id.0.clone(), &q)
    })
    .await
}

async fn simulate(State(app): State<App>, headers: HeaderMap, raw: Bytes) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let req: SimulateRequest = body(&raw)?;
        to_json(p.simulate_watershed(&req, &actor)?)
    })
    .await
}

async fn dashboard(State(app): State<App>, headers: HeaderMap, Path(id): Path<String>) -> Response {
    app.call(&headers, Auth::Optional, move |p, actor| to_json(p.dashboard_summary(&ProjectId::new(id), &actor)?)).await
}

async fn grant(State(app): State<App>, headers: HeaderMap, raw: Bytes) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let req: PolicyRequest = body(&raw)?;
        Ok(json!({ "policy_id": p.grant(req, &actor)? }))
    })
    .await
}

async fn add_principal(State(app): State<App>, headers: HeaderMap, raw: Bytes) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let new: NewPrincipal = body(&raw)?;
        Ok(json!({ "principal_id": p.add_principal(new, &actor)? }))
    })
    .await
}

async fn list_backends(State(app): State<App>, headers: HeaderMap) -> Response {
    app.call(&headers, Auth::Required, move |p, _| to_json(p.backends())).await
}

async fn register_backend(State(app): State<App>, headers: HeaderMap, raw: Bytes) -> Response {
    app.call(&headers, Auth::Required, move |p, actor| {
        let b: Backend = body(&raw)?;
        let name = b.name.clone();
        p.register_backend(b, &actor)?;
        Ok(json!({ "name": name }))
    })
    .await
}

/// Landing-page numbers for one project.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DashboardSummary {
    pub project_id: ProjectId,
    pub datasets: usize,
    pub working_sets_open: usize,
    pub jobs: BTreeMap<String, usize>,
    pub recent_events: Vec<ienv_core::events::Event>,
    /// Latest succeeded model run per catchment.
    pub latest_model_runs: Vec<ModelRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub catchment_id: String,
    pub job_id: JobId,
    pub ended_at: Option<Timestamp>,
    pub summary: Json,
}

const RECENT_EVENTS: usize = 10;

impl Platform {
    pub fn dashboard_summary(&self, project: &ProjectId, actor: &PrincipalId) -> Result<DashboardSummary> {
        self.project(project, actor)?;
        let st = self.read();
        let in_project = |d: &DatasetId| st.datasets.get(d).is_some_and(|e| &e.descriptor.project_id == project);
        let datasets = st.datasets.values().filter(|e| &e.descriptor.project_id == project).count();
        let working_sets_open = st
            .working_sets
            .values()
            .filter(|w| w.state == crate::workingset::WsState::Open && w.base.iter().any(|p| in_project(&p.dataset_id)))
            .count();
        let jobs = st.jobs_by_state(Some(project)).into_iter().map(|(k, v)| (k.to_owned(), v)).collect();
        let recent_events: Vec<_> = st
            .events
            .iter()
            .rev()
            .filter(|e| e.attr_str("project_id") == Some(project.as_str()))
            .take(RECENT_EVENTS)
            .cloned()
            .collect();
        let mut latest: BTreeMap<String, ModelRun> = BTreeMap::new();
        for j in st.jobs.values().filter(|j| j.state == ienv_core::jobs::JobState::Succeeded) {
            let Some(summary) = &j.summary else { continue };
            let Some(catchment) = summary.get("catchment_id").and_then(Json::as_str) else { continue };
            let touches =
                j.outputs.iter().any(|o| o.kind == EntityKind::DatasetVersion && in_project(&DatasetId::new(o.id.clone())))
                    || j.spec.inputs.iter().any(|i| match i {
                        JobInput::Dataset { dataset_id, .. } => in_project(dataset_id),
                        JobInput::WorkingSet { working_set_id } => {
                            st.working_sets.get(working_set_id).is_some_and(|w| w.base.iter().any(|p| in_project(&p.dataset_id)))
                        }
                    });
            if !touches {
                continue;
            }
            let run = ModelRun {
                catchment_id: catchment.to_owned(),
                job_id: j.job_id.clone(),
                ended_at: j.ended_at,
                summary: summary.clone(),
            };
            match latest.get(catchment) {
                Some(prev) if prev.ended_at >= run.ended_at => {}
                _ => {
                    latest.insert(catchment.to_owned(), run);
                }
            }
        }
        Ok(DashboardSummary {
            project_id: project.clone(),
            datasets,
            working_sets_open,
            jobs,
            recent_events,
            latest_model_runs: latest.into_values().collect(),
        })
    }
}

/// Serves `platform` on an already-bound listener until the future is
/// dropped.
pub async fn serve_on(listener: tokio::net::TcpListener, platform: Platform) -> Result<()> {
    let addr = listener.local_addr().map(|a| a.to_string()).unwrap_or_default();
    axum::serve(listener, router(platform)).await.map_err(|e| Error::BindFailed { addr, detail: e.to_string() })
}

/// Binds `config.server.bind` and serves until the process exits.
pub fn serve(config: crate::config::Config) -> Result<()> {
    let addr = config.server.bind.clone();
    let platform = Platform::new(config)?;
    let rt =
        tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| Error::Storage(format!("runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Error::BindFailed { addr: addr.clone(), detail: e.to_string() })?;
        log::info!("listening on {}", listener.local_addr().map(|a| a.to_string()).unwrap_or(addr));
        serve_on(listener, platform).await
    })
}

/// A server on a background thread, for tests and embedding.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Starts serving on `bind` (port 0 picks a free port).
pub fn spawn(platform: Platform, bind: &str) -> Result<ServerHandle> {
    let std_listener =
        std::net::TcpListener::bind(bind).map_err(|e| Error::BindFailed { addr: bind.into(), detail: e.to_string() })?;
    std_listener.set_nonblocking(true).map_err(|e| Error::BindFailed { addr: bind.into(), detail: e.to_string() })?;
    let addr = std_listener.local_addr().map_err(|e| Error::BindFailed { addr: bind.into(), detail: e.to_string() })?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name("ienv-api".into())
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().expect("runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                let server = axum::serve(listener, router(platform)).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = server.await {
                    log::error!("server stopped: {e}");
                }
            });
        })
        .map_err(|e| Error::Storage(format!("spawn server: {e}")))?;
    Ok(ServerHandle { addr, shutdown: Some(tx), thread: Some(thread) })
}
