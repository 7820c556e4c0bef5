//! `ienv` command-line client. Every network command is one or more calls to
//! the `/v1` API; `serve` runs the API itself.

use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value as Json};

use crate::config::Config;

/// One API call as issued by the client.
#[derive(Clone, Debug, PartialEq)]
pub struct ApiRequest {
    pub server: String,
    pub method: &'static str,
    /// Path below the server root, e.g. `/v1/datasets`.
    pub path: String,
    pub query: Vec<(String, String)>,
    pub token: Option<String>,
    pub body: Option<Json>,
}

/// Carries requests to the server and returns the response envelope.
pub trait Transport {
    fn send(&mut self, req: &ApiRequest) -> Result<Json, String>;
}

/// Blocking HTTP transport.
#[derive(Debug, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn send(&mut self, req: &ApiRequest) -> Result<Json, String> {
        let url = format!("{}{}", req.server.trim_end_matches('/'), req.path);
        let mut r = ureq::request(req.method, &url);
        for (k, v) in &req.query {
            r = r.query(k, v);
        }
        if let Some(t) = &req.token {
            r = r.set("Authorization", &format!("Bearer {t}"));
        }
        let resp = match &req.body {
            Some(b) => r.send_json(b.clone()),
            None => r.call(),
        };
        let resp = match resp {
            Ok(resp) => resp,
            Err(ureq::Error::Status(_, resp)) => resp,
            Err(e) => return Err(format!("cannot reach {}: {e}", req.server)),
        };
        resp.into_json().map_err(|e| format!("malformed response from {url}: {e}"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum OutputMode {
    #[default]
    Table,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "ienv", version, about = "iEnvironment platform client and server")]
struct Cli {
    /// API server URL.
    #[arg(long, global = true, env = "IENV_SERVER", default_value = "http://127.0.0.1:8080")]
    server: String,
    /// Session token file.
    #[arg(long, global = true, env = "IENV_TOKEN_FILE")]
    token_file: Option<PathBuf>,
    /// Service configuration file (for `serve`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutputMode::Table)]
    output: OutputMode,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve,
    /// Open a session and store its token.
    Login {
        name: String,
        #[arg(long, env = "IENV_SECRET", hide_env_values = true)]
        secret: String,
    },
    /// Projects.
    #[command(subcommand)]
    Project(ProjectCmd),
    /// Datasets.
    #[command(subcommand)]
    Ds(DsCmd),
    /// Ingestion sources and imports.
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Working sets.
    #[command(subcommand)]
    Ws(WsCmd),
    /// Compute jobs.
    #[command(subcommand)]
    Job(JobCmd),
    /// Event subscriptions.
    #[command(subcommand)]
    Sub(SubCmd),
    /// Provenance queries.
    #[command(subcommand)]
    Prov(ProvCmd),
    /// Principals, policies and backends.
    #[command(subcommand)]
    Admin(AdminCmd),
}

#[derive(Debug, Subcommand)]
enum ProjectCmd {
    List,
    Create {
        name: String,
        #[arg(long, default_value = "")]
        description: String,
    },
}

#[derive(Debug, Subcommand)]
enum DsCmd {
    List {
        #[arg(long)]
        project: Option<String>,
        #[arg(long)]
        study_type: Option<String>,
        /// min_lon,min_lat,max_lon,max_lat
        #[arg(long)]
        bbox: Option<String>,
    },
    Create {
        #[arg(long)]
        project: String,
        #[arg(long)]
        name: String,
        #[arg(long)]
        study_type: String,
        /// Schema JSON, `@file` or `-` for stdin.
        #[arg(long)]
        schema: String,
        /// min_lon,min_lat,max_lon,max_lat
        #[arg(long)]
        region: String,
        #[arg(long = "key")]
        key_fields: Vec<String>,
        #[arg(long)]
        public: bool,
    },
    Export {
        dataset: String,
        #[arg(long)]
        version: Option<u64>,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum IngestCmd {
    /// Register a source feeding a dataset.
    Register {
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        uri: String,
        #[arg(long, default_value = "csv")]
        format: String,
        /// `column=field[:transform]`, transform one of to_float, to_int,
        /// trim, parse_timestamp=<fmt>.
        #[arg(long = "map", required = true)]
        field_map: Vec<String>,
        #[arg(long = "key", required = true)]
        key_fields: Vec<String>,
    },
    Plan {
        source: String,
    },
    Run {
        source: String,
        #[arg(long)]
        plan: Option<String>,
    },
    List,
}

#[derive(Debug, Subcommand)]
enum WsCmd {
    Create {
        /// `dataset[@version]`; head when no version is given.
        #[arg(long = "pin", required = true)]
        pins: Vec<String>,
    },
    Write {
        ws: String,
        #[arg(long)]
        dataset: String,
        /// JSON array of ops, `@file` or `-` for stdin.
        #[arg(long)]
        ops: String,
    },
    Diff {
        ws: String,
    },
    Merge {
        ws: String,
        #[arg(long, value_enum, default_value_t = Strategy::AbortOnConflict)]
        strategy: Strategy,
    },
    Discard {
        ws: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Strategy {
    AbortOnConflict,
    Ours,
    Theirs,
}

impl Strategy {
    fn wire(self) -> &'static str {
        match self {
            Strategy::AbortOnConflict => "abort_on_conflict",
            Strategy::Ours => "ours",
            Strategy::Theirs => "theirs",
        }
    }
}

#[derive(Debug, Subcommand)]
enum JobCmd {
    Submit(SubmitArgs),
    Status { job: String },
    Cancel { job: String },
}

#[derive(Debug, Args)]
struct SubmitArgs {
    /// `name[@version]`
    #[arg(long)]
    algo: String,
    /// `dataset[@version]`
    #[arg(long = "input")]
    inputs: Vec<String>,
    #[arg(long)]
    working_set: Option<String>,
    /// `key=value`; the value is read as JSON when it parses, else as text.
    #[arg(long = "param")]
    params: Vec<String>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long, default_value_t = 0)]
    priority: u32,
    /// Poll until the job finishes.
    #[arg(long)]
    wait: bool,
}

#[derive(Debug, Subcommand)]
enum SubCmd {
    Add {
        predicate: String,
        /// Deliver by HTTP POST instead of the feed.
        #[arg(long)]
        webhook: Option<String>,
    },
    List,
    Feed {
        #[arg(long, default_value_t = 0)]
        since: u64,
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
enum ProvCmd {
    Lineage {
        #[arg(long, default_value = "dataset_version")]
        kind: String,
        #[arg(long)]
        id: String,
        #[arg(long)]
        version: Option<u64>,
        #[arg(long, default_value = "upstream")]
        direction: String,
        #[arg(long)]
        depth: Option<usize>,
        /// Print the graph in DOT form.
        #[arg(long)]
        dot: bool,
    },
    Cumulative {
        #[arg(long)]
        bbox: Option<String>,
        #[arg(long)]
        algo: Option<String>,
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        to: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum AdminCmd {
    /// Create a user, team or service account.
    User {
        name: String,
        #[arg(long, value_enum, default_value_t = Kind::User)]
        kind: Kind,
        #[arg(long, env = "IENV_NEW_SECRET", hide_env_values = true)]
        secret: Option<String>,
        /// Team principal id; repeatable.
        #[arg(long = "team")]
        teams: Vec<String>,
        #[arg(long)]
        platform_admin: bool,
    },
    Grant {
        #[arg(long)]
        principal: String,
        #[arg(long)]
        role: String,
        /// `kind:id`, e.g. `project:prj-1` or `dataset:*`.
        #[arg(long)]
        resource: String,
        #[arg(long)]
        deny: bool,
    },
    Backend {
        #[command(subcommand)]
        cmd: BackendCmd,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    User,
    Team,
    Service,
}

#[derive(Debug, Subcommand)]
enum BackendCmd {
    Add {
        name: String,
        #[arg(long)]
        capacity: u32,
        /// Register as an external stub with this dispatch latency.
        #[arg(long)]
        latency_ms: Option<u64>,
    },
    List,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Domain(String),
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn domain(msg: impl Into<String>) -> Failure {
    Failure::Domain(msg.into())
}

struct Session<'a> {
    server: String,
    token_file: PathBuf,
    output: OutputMode,
    transport: &'a mut dyn Transport,
    out: &'a mut dyn Write,
}

/// Default token location: `$HOME/.config/ienv/token`.
pub fn default_token_file() -> PathBuf {
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".config").join("ienv").join("token")
}

/// Writes the token readable by the owner only.
pub fn save_token(path: &Path, token: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut opts = std::fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        f.set_permissions(std::fs::Permissions::from_mode(0o600))?;
    }
    f.write_all(token.as_bytes())
}

impl Session<'_> {
    fn token(&self) -> Option<String> {
        std::fs::read_to_string(&self.token_file).ok().map(|t| t.trim().to_owned()).filter(|t| !t.is_empty())
    }

    fn call(&mut self, method: &'static str, path: &str, query: Vec<(String, String)>, body: Option<Json>) -> Outcome<Json> {
        let req =
            ApiRequest { server: self.server.clone(), method, path: format!("/v1{path}"), query, token: self.token(), body };
        let env = self.transport.send(&req).map_err(domain)?;
        if env["ok"].as_bool() == Some(true) {
            return Ok(env["data"].clone());
        }
        let e = &env["error"];
        let mut msg = format!("{}: {}", e["code"].as_str().unwrap_or("error"), e["message"].as_str().unwrap_or(""));
        if !e["detail"].is_null() {
            msg.push_str(&format!("\n{}", e["detail"]));
        }
        Err(domain(msg))
    }

    fn get(&mut self, path: &str, query: Vec<(String, String)>) -> Outcome<Json> {
        self.call("GET", path, query, None)
    }

    fn post(&mut self, path: &str, body: Json) -> Outcome<Json> {
        self.call("POST", path, Vec::new(), Some(body))
    }

    /// Follows `next_cursor` until the listing is exhausted.
    fn get_all(&mut self, path: &str, query: Vec<(String, String)>) -> Outcome<Vec<Json>> {
        let mut items = Vec::new();
        let mut cursor: Option<String> = None;
        loop {
            let mut q = query.clone();
            if let Some(c) = &cursor {
                q.push(("cursor".into(), c.clone()));
            }
            let page = self.get(path, q)?;
            items.extend(page["items"].as_array().cloned().unwrap_or_default());
            match page["next_cursor"].as_str() {
                Some(c) => cursor = Some(c.to_owned()),
                None => return Ok(items),
            }
        }
    }

    fn line(&mut self, text: &str) -> Outcome {
        writeln!(self.out, "{text}").map_err(|e| domain(format!("write: {e}")))
    }

    fn emit_one(&mut self, v: &Json) -> Outcome {
        match self.output {
            OutputMode::Json => self.line(&v.to_string()),
            OutputMode::Table => self.line(&kv_line(v)),
        }
    }

    fn emit_list(&mut self, items: &[Json], columns: &[&str]) -> Outcome {
        match self.output {
            OutputMode::Json => {
                for i in items {
                    self.line(&i.to_string())?;
                }
                Ok(())
            }
            OutputMode::Table => {
                self.line(&columns.join("\t"))?;
                for i in items {
                    let row: Vec<String> = columns.iter().map(|c| cell(lookup(i, c))).collect();
                    self.line(&row.join("\t"))?;
                }
                Ok(())
            }
        }
    }
}

/// Dotted-path field lookup.
fn lookup<'a>(v: &'a Json, path: &str) -> &'a Json {
    path.split('.').fold(v, |v, k| &v[k])
}

fn cell(v: &Json) -> String {
    match v {
        Json::Null => "-".into(),
        Json::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// `key=value` pairs of an object's top-level fields.
fn kv_line(v: &Json) -> String {
    match v {
        Json::Object(map) => map
            .iter()
            .map(|(k, v)| match v {
                Json::Null => format!("{k}=none"),
                _ => format!("{k}={}", cell(v)),
            })
            .collect::<Vec<_>>()
            .join(" "),
        other => cell(other),
    }
}

/// Inline JSON, `@path` to read a file, or `-` for stdin.
fn json_arg(text: &str) -> Outcome<Json> {
    let raw = if text == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s).map_err(|e| domain(format!("stdin: {e}")))?;
        s
    } else if let Some(path) = text.strip_prefix('@') {
        std::fs::read_to_string(path).map_err(|e| domain(format!("{path}: {e}")))?
    } else {
        text.to_owned()
    };
    serde_json::from_str(&raw).map_err(|e| usage(format!("invalid JSON argument: {e}")))
}

/// `name[@suffix]`.
fn split_at(text: &str) -> (&str, Option<&str>) {
    match text.split_once('@') {
        Some((a, b)) => (a, Some(b)),
        None => (text, None),
    }
}

fn pin_arg(text: &str) -> Outcome<Json> {
    let (ds, v) = split_at(text);
    let version = v.map(|v| v.parse::<u64>().map_err(|_| usage(format!("`{text}`: version must be a number")))).transpose()?;
    Ok(json!({ "dataset_id": ds, "version": version }))
}

fn mapping_arg(text: &str) -> Outcome<Json> {
    let (column, rest) = text.split_once('=').ok_or_else(|| usage(format!("mapping `{text}` must be column=field")))?;
    let (field, transform) = match rest.split_once(':') {
        None => (rest, json!("identity")),
        Some((f, t)) => {
            let t = match t.split_once('=') {
                Some(("parse_timestamp", fmt)) => json!({ "parse_timestamp": fmt }),
                None if ["identity", "to_float", "to_int", "trim"].contains(&t) => json!(t),
                _ => return Err(usage(format!("unknown transform `{t}`"))),
            };
            (f, t)
        }
    };
    Ok(json!({ "column": column, "field": field, "transform": transform }))
}

fn param_arg(text: &str) -> Outcome<(String, Json)> {
    let (k, v) = text.split_once('=').ok_or_else(|| usage(format!("param `{text}` must be key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Json::String(v.to_owned()));
    Ok((k.to_owned(), value))
}

fn resource_arg(text: &str) -> Outcome<Json> {
    let (kind, id) = text.split_once(':').ok_or_else(|| usage(format!("resource `{text}` must be kind:id")))?;
    if ienv_core::access::ResourceKind::parse(kind).is_none() {
        return Err(usage(format!("unknown resource kind `{kind}`")));
    }
    Ok(json!({ "kind": kind, "id": id }))
}

fn bbox_arg(text: &str) -> Outcome<Json> {
    let r = crate::api::parse_bbox(text).map_err(|e| usage(e.to_string()))?;
    Ok(json!({ "min_lon": r.min_lon, "min_lat": r.min_lat, "max_lon": r.max_lon, "max_lat": r.max_lat }))
}

fn opt(query: &mut Vec<(String, String)>, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        query.push((key.to_owned(), v.to_string()));
    }
}

fn serve(config: Option<&Path>) -> Outcome {
    let cfg = match config {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
    .map_err(|e| domain(e.to_string()))?;
    crate::api::serve(cfg).map_err(|e| domain(e.to_string()))
}

const TERMINAL: [&str; 3] = ["succeeded", "failed", "cancelled"];

fn dispatch(s: &mut Session<'_>, command: Command, config: Option<&Path>) -> Outcome {
    match command {
        Command::Serve => serve(config),
        Command::Login { name, secret } => {
            let data = s.post("/sessions", json!({ "name": name, "secret": secret }))?;
            let token = data["token"].as_str().ok_or_else(|| domain("session without token"))?;
            save_token(&s.token_file, token).map_err(|e| domain(format!("{}: {e}", s.token_file.display())))?;
            s.emit_one(&json!({ "principal_id": data["principal_id"], "expires_at": data["expires_at"] }))
        }
        Command::Project(ProjectCmd::List) => {
            let items = s.get_all("/projects", Vec::new())?;
            s.emit_list(&items, &["project_id", "name", "description"])
        }
        Command::Project(ProjectCmd::Create { name, description }) => {
            let data = s.post("/projects", json!({ "name": name, "description": description }))?;
            s.emit_one(&data)
        }
        Command::Ds(cmd) => ds(s, cmd),
        Command::Ingest(cmd) => ingest(s, cmd),
        Command::Ws(cmd) => ws(s, cmd),
        Command::Job(cmd) => job(s, cmd),
        Command::Sub(cmd) => sub(s, cmd),
        Command::Prov(cmd) => prov(s, cmd),
        Command::Admin(cmd) => admin(s, cmd),
    }
}

fn ds(s: &mut Session<'_>, cmd: DsCmd) -> Outcome {
    match cmd {
        DsCmd::List { project, study_type, bbox } => {
            let mut q = Vec::new();
            opt(&mut q, "project", project);
            opt(&mut q, "study_type", study_type);
            if let Some(b) = &bbox {
                bbox_arg(b)?;
            }
            opt(&mut q, "bbox", bbox);
            let items = s.get_all("/datasets", q)?;
            s.emit_list(&items, &["dataset_id", "name", "study_type.label", "project_id"])
        }
        DsCmd::Create { project, name, study_type, schema, region, key_fields, public } => {
            let body = json!({
                "name": name,
                "study_type": study_type,
                "schema": json_arg(&schema)?,
                "project_id": project,
                "region": bbox_arg(&region)?,
                "key_fields": key_fields,
                "public": public,
            });
            let data = s.post("/datasets", body)?;
            s.emit_one(&json!({ "dataset_id": data["dataset_id"], "name": data["name"] }))
        }
        DsCmd::Export { dataset, version, format, out } => {
            let mut q = vec![("format".to_owned(), format)];
            opt(&mut q, "version", version);
            let data = s.get(&format!("/datasets/{dataset}/export"), q)?;
            let content = data["content"].as_str().unwrap_or_default();
            match out {
                Some(path) => std::fs::write(&path, content).map_err(|e| domain(format!("{}: {e}", path.display()))),
                None if s.output == OutputMode::Json => s.line(&data.to_string()),
                None => s.out.write_all(content.as_bytes()).map_err(|e| domain(format!("write: {e}"))),
            }
        }
    }
}

fn ingest(s: &mut Session<'_>, cmd: IngestCmd) -> Outcome {
    match cmd {
        IngestCmd::Register { dataset, uri, format, field_map, key_fields } => {
            let field_map = field_map.iter().map(|m| mapping_arg(m)).collect::<Outcome<Vec<_>>>()?;
            let body = json!({
                "uri": uri,
                "format": format,
                "field_map": field_map,
                "key_fields": key_fields,
                "target_dataset_id": dataset,
            });
            let data = s.post("/sources", body)?;
            s.emit_one(&data)
        }
        IngestCmd::Plan { source } => {
            let data = s.post(&format!("/sources/{source}/plan"), json!({}))?;
            match s.output {
                OutputMode::Json => s.line(&data.to_string()),
                OutputMode::Table => {
                    s.line(&format!("plan_id={} source_id={}", cell(&data["plan_id"]), cell(&data["source_id"])))?;
                    for step in data["steps"].as_array().cloned().unwrap_or_default() {
                        s.line(&format!("  {}", kv_line(&step)))?;
                    }
                    Ok(())
                }
            }
        }
        IngestCmd::Run { source, plan } => {
            let body = match plan {
                Some(p) => json!({ "plan_id": p }),
                None => json!({}),
            };
            let data = s.post(&format!("/sources/{source}/import"), body)?;
            match s.output {
                OutputMode::Json => s.line(&data.to_string()),
                OutputMode::Table => {
                    let rejected = data["rejected"].as_array().cloned().unwrap_or_default();
                    s.line(&format!(
                        "fetched={} inserted={} updated={} unchanged={} rejected={} new_version={}",
                        data["fetched"],
                        data["inserted"],
                        data["updated"],
                        data["unchanged"],
                        rejected.len(),
                        if data["new_version"].is_null() { "none".into() } else { data["new_version"].to_string() },
                    ))?;
                    for r in rejected {
                        s.line(&format!("  row {}: {}", r["row"], cell(&r["reason"])))?;
                    }
                    Ok(())
                }
            }
        }
        IngestCmd::List => {
            let items = s.get_all("/sources", Vec::new())?;
            s.emit_list(&items, &["source_id", "target_dataset_id", "format", "uri"])
        }
    }
}

fn print_changes(s: &mut Session<'_>, cs: &Json) -> Outcome {
    if s.output == OutputMode::Json {
        return s.line(&cs.to_string());
    }
    let mut any = false;
    for (ds, c) in cs.as_object().cloned().unwrap_or_default() {
        for r in c["added"].as_array().into_iter().flatten() {
            s.line(&format!("+ {ds} {}", cell(&r["record_id"])))?;
            any = true;
        }
        for r in c["modified"].as_array().into_iter().flatten() {
            s.line(&format!("~ {ds} {}", cell(&r["record_id"])))?;
            any = true;
        }
        for r in c["deleted"].as_array().into_iter().flatten() {
            s.line(&format!("- {ds} {}", cell(r)))?;
            any = true;
        }
    }
    if !any {
        s.line("no changes")?;
    }
    Ok(())
}

fn ws(s: &mut Session<'_>, cmd: WsCmd) -> Outcome {
    match cmd {
        WsCmd::Create { pins } => {
            let pins = pins.iter().map(|p| pin_arg(p)).collect::<Outcome<Vec<_>>>()?;
            let data = s.post("/working-sets", json!({ "pins": pins }))?;
            s.emit_one(&json!({ "ws_id": data["ws_id"], "state": data["state"] }))
        }
        WsCmd::Write { ws, dataset, ops } => {
            let ops = json_arg(&ops)?;
            let data = s.post(&format!("/working-sets/{ws}/records"), json!({ "dataset_id": dataset, "ops": ops }))?;
            print_changes(s, &data)
        }
        WsCmd::Diff { ws } => {
            let data = s.get(&format!("/working-sets/{ws}/diff"), Vec::new())?;
            print_changes(s, &data)
        }
        WsCmd::Merge { ws, strategy } => {
            let data = s.post(&format!("/working-sets/{ws}/merge"), json!({ "strategy": strategy.wire() }))?;
            s.emit_one(&data)
        }
        WsCmd::Discard { ws } => {
            let data = s.call("DELETE", &format!("/working-sets/{ws}"), Vec::new(), None)?;
            s.emit_one(&data)
        }
    }
}

fn job_line(j: &Json) -> Json {
    json!({
        "job_id": j["job_id"],
        "state": j["state"],
        "backend": j["backend"],
        "outputs": j["outputs"].as_array().map(|o| o.iter().map(|e| {
            match e["version"].as_u64() {
                Some(v) => format!("{}@{v}", cell(&e["id"])),
                None => cell(&e["id"]),
            }
        }).collect::<Vec<_>>()),
        "error": j["error"],
    })
}

fn job(s: &mut Session<'_>, cmd: JobCmd) -> Outcome {
    match cmd {
        JobCmd::Submit(a) => {
            let (name, version) = split_at(&a.algo);
            let mut inputs = Vec::new();
            for i in &a.inputs {
                let mut pin = pin_arg(i)?;
                pin["type"] = json!("dataset");
                inputs.push(pin);
            }
            if let Some(w) = &a.working_set {
                inputs.push(json!({ "type": "working_set", "working_set_id": w }));
            }
            let params: serde_json::Map<String, Json> = a.params.iter().map(|p| param_arg(p)).collect::<Outcome<_>>()?;
            let body = json!({
                "algo_name": name,
                "algo_version": version,
                "inputs": inputs,
                "params": params,
                "backend_hint": a.backend,
                "priority": a.priority,
            });
            let data = s.post("/jobs", body)?;
            let id = data["job_id"].as_str().unwrap_or_default().to_owned();
            if !a.wait {
                return s.emit_one(&data);
            }
            loop {
                let j = s.get(&format!("/jobs/{id}"), Vec::new())?;
                if TERMINAL.contains(&j["state"].as_str().unwrap_or_default()) {
                    let failed = j["state"] != "succeeded";
                    s.emit_one(&job_line(&j))?;
                    return if failed { Err(domain(format!("job {id} {}", cell(&j["state"])))) } else { Ok(()) };
                }
                std::thread::sleep(std::time::Duration::from_millis(200));
            }
        }
        JobCmd::Status { job } => {
            let j = s.get(&format!("/jobs/{job}"), Vec::new())?;
            match s.output {
                OutputMode::Json => s.line(&j.to_string()),
                OutputMode::Table => s.emit_one(&job_line(&j)),
            }
        }
        JobCmd::Cancel { job } => {
            let j = s.post(&format!("/jobs/{job}/cancel"), json!({}))?;
            s.emit_one(&json!({ "job_id": j["job_id"], "state": j["state"] }))
        }
    }
}

fn sub(s: &mut Session<'_>, cmd: SubCmd) -> Outcome {
    match cmd {
        SubCmd::Add { predicate, webhook } => {
            let channel = match webhook {
                Some(url) => json!({ "type": "webhook", "url": url }),
                None => json!({ "type": "feed" }),
            };
            let data = s.post("/subscriptions", json!({ "predicate": predicate, "channel": channel }))?;
            s.emit_one(&data)
        }
        SubCmd::List => {
            let items = s.get_all("/subscriptions", Vec::new())?;
            s.emit_list(&items, &["sub_id", "channel.type", "predicate_text", "active"])
        }
        SubCmd::Feed { since, limit } => {
            let mut q = vec![("since".to_owned(), since.to_string())];
            opt(&mut q, "limit", limit);
            let data = s.get("/events/feed", q)?;
            let items: Vec<Json> = data["items"].as_array().cloned().unwrap_or_default();
            s.emit_list(&items, &["event.event_id", "event.kind", "event.occurred_at", "event.attrs.dataset_id"])
        }
    }
}

fn prov(s: &mut Session<'_>, cmd: ProvCmd) -> Outcome {
    match cmd {
        ProvCmd::Lineage { kind, id, version, direction, depth, dot } => {
            let mut q = vec![("kind".to_owned(), kind), ("id".to_owned(), id), ("direction".to_owned(), direction)];
            opt(&mut q, "version", version);
            opt(&mut q, "depth", depth);
            let data = s.get("/provenance/lineage", q)?;
            if dot {
                return s.line(data["dot"].as_str().unwrap_or_default().trim_end());
            }
            match s.output {
                OutputMode::Json => s.line(&data.to_string()),
                OutputMode::Table => {
                    let adjacency = data["adjacency"].as_object().cloned().unwrap_or_default();
                    for (from, to) in adjacency {
                        for t in to.as_array().into_iter().flatten() {
                            s.line(&format!("{from} -> {}", cell(t)))?;
                        }
                    }
                    Ok(())
                }
            }
        }
        ProvCmd::Cumulative { bbox, algo, from, to } => {
            let mut q = Vec::new();
            if let Some(b) = &bbox {
                bbox_arg(b)?;
            }
            opt(&mut q, "bbox", bbox);
            opt(&mut q, "algo", algo);
            opt(&mut q, "from", from);
            opt(&mut q, "to", to);
            let data = s.get("/provenance/cumulative", q)?;
            let items = data.as_array().cloned().unwrap_or_default();
            s.emit_list(&items, &["activity.activity_id", "activity.started_at", "output.id", "output.version"])
        }
    }
}

fn admin(s: &mut Session<'_>, cmd: AdminCmd) -> Outcome {
    match cmd {
        AdminCmd::User { name, kind, secret, teams, platform_admin } => {
            let kind = match kind {
                Kind::User => "user",
                Kind::Team => "team",
                Kind::Service => "service",
            };
            let body = json!({
                "name": name,
                "kind": kind,
                "secret": secret,
                "member_of": teams,
                "platform_admin": platform_admin,
            });
            let data = s.post("/admin/principals", body)?;
            s.emit_one(&data)
        }
        AdminCmd::Grant { principal, role, resource, deny } => {
            let body = json!({
                "principal_id": principal,
                "role": role,
                "resource": resource_arg(&resource)?,
                "effect": if deny { "deny" } else { "allow" },
            });
            let data = s.post("/admin/policies", body)?;
            s.emit_one(&data)
        }
        AdminCmd::Backend { cmd: BackendCmd::Add { name, capacity, latency_ms } } => {
            let kind = match latency_ms {
                Some(ms) => json!({ "type": "external-stub", "latency_ms": ms }),
                None => json!({ "type": "local" }),
            };
            let data = s.post("/admin/backends", json!({ "name": name, "capacity": capacity, "kind": kind }))?;
            s.emit_one(&data)
        }
        AdminCmd::Backend { cmd: BackendCmd::List } => {
            let data = s.get("/admin/backends", Vec::new())?;
            let items = data.as_array().cloned().unwrap_or_default();
            s.emit_list(&items, &["name", "capacity", "kind.type"])
        }
    }
}

/// Runs the client with explicit IO; returns the process exit code.
pub fn run<I, T>(args: I, transport: &mut dyn Transport, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let mut session = Session {
        server: cli.server,
        token_file: cli.token_file.unwrap_or_else(default_token_file),
        output: cli.output,
        transport,
        out,
    };
    match dispatch(&mut session, cli.command, cli.config.as_deref()) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}\n\nUsage: ienv [OPTIONS] <COMMAND>\nFor more information, try '--help'.");
            2
        }
        Err(Failure::Domain(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}

/// Process entry point.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(buf, "{} {} {}", chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ"), record.level(), record.args())
        })
        .init();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut HttpTransport, &mut stdout.lock(), &mut stderr.lock())
}
