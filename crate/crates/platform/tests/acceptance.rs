//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero
//! exit when any fails.

mod common;
#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use common::{values, world, world_with, World, SECRET};
use ienv::catalog::{DatasetFilter, NewAlgorithm, RecordInput, VersionSel};
use ienv::compute::{JobContext, JobInput, JobOutput, JobResult, JobSpec};
use ienv::ingest::{FieldMapping, NewSource, SourceFormat, Transform};
use ienv::notify::Channel;
use ienv::workingset::{Pin, WsOp};
use ienv::{models, Config, Error};
use ienv_core::access::{self, Action, Effect, Policy, Resource, ResourceKind, Role};
use ienv_core::catalog::AlgorithmKind;
use ienv_core::jobs::{Backend, BackendKind, JobState};
use ienv_core::lineage::{ActivityKind, Direction, EntityKind, EntityRef};
use ienv_core::overlay::MergeStrategy;
use ienv_core::predicate::{Attrs, Predicate, Scalar};
use ienv_core::schema::{FieldDef, FieldKind};
use ienv_core::watershed::{self, BmpScenario, Catchment, DailyWeather, LandUse};
use ienv_core::{DatasetId, GeoRegion, JobId, PrincipalId, RecordId, Schema, SourceId, Timestamp, Value};
use oracles::{Cell, Expr, Lit, RefPolicy, Strategy as RefStrategy};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value as Json};

/// Wall-clock budget for the isolation scenario.
const ISOLATION_BUDGET: Duration = Duration::from_secs(5);
/// Daily water-balance residual, in mm.
const MASS_TOLERANCE_MM: f64 = 1e-9;
/// Agreement between the requested efficiency and the realised load reduction.
const LINEARITY_TOLERANCE: f64 = 1e-9;

const MERGE_INSTANCES: usize = 500;
const PREDICATE_PAIRS: usize = 1000;
const RANDOM_FIXTURES: usize = 100;
const CATCHMENTS: usize = 200;
const DAYS: usize = 365;
const POLICY_TABLES: usize = 500;

type Verdict = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Verdict);
type HeadBytes = (u64, String, Vec<u8>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)*));
        }
    };
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "working-set isolation", isolation),
        (2, "merge oracle", merge_oracle),
        (3, "pub-sub oracle", pubsub_oracle),
        (4, "ingestion idempotence", ingestion),
        (5, "water-balance conservation", water_balance),
        (6, "access-control oracle", acl_oracle),
        (7, "provenance completeness", provenance),
        (8, "compute contract", compute_contract),
        (9, "API parity", api_parity),
    ];
    let filter: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let ms = t.elapsed().as_millis();
        match verdict {
            Ok(note) => println!("criterion {n}: PASS {name}: {note} [{ms} ms]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n}: FAIL {name}: {why} [{ms} ms]");
            }
        }
        std::io::stdout().flush().ok();
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ------------------------------------------------------------- scenario

/// The shared end-to-end scenario: a weather table imported from CSV, a
/// catchment table, and a working set where 30 days were edited and the
/// model was run before the set was discarded.
struct Scenario {
    w: World,
    dir: tempfile::TempDir,
    weather: DatasetId,
    catchment: DatasetId,
    source: SourceId,
    job: JobId,
    elapsed: Duration,
}

fn weather_csv(path: &Path, days: usize, seed: u64) {
    let mut rng = StdRng::seed_from_u64(seed);
    let start = chrono::NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
    let mut f = std::fs::File::create(path).unwrap();
    writeln!(f, "date,precip_mm,pet_mm").unwrap();
    for d in 0..days {
        let date = start + chrono::Days::new(d as u64);
        let precip = if rng.random_bool(0.4) { rng.random_range(0.5..60.0) } else { 0.0 };
        writeln!(f, "{date},{precip:.3},{:.3}", rng.random_range(0.0..6.0)).unwrap();
    }
}

fn weather_source(w: &World, ds: &DatasetId, path: &Path) -> SourceId {
    let new = NewSource {
        uri: path.to_str().unwrap().into(),
        format: SourceFormat::Csv,
        field_map: vec![
            FieldMapping::new("date", "date", Transform::ParseTimestamp("%Y-%m-%d".into())),
            FieldMapping::new("precip_mm", "precip_mm", Transform::ToFloat),
            FieldMapping::new("pet_mm", "pet_mm", Transform::ToFloat),
        ],
        key_fields: vec!["date".into()],
        target_dataset_id: ds.clone(),
    };
    w.p.register_source(new, &w.admin).unwrap()
}

fn import(w: &World, src: &SourceId) -> ienv::ingest::ImportReport {
    let plan = w.p.generate_plan(src).unwrap();
    w.p.run_import(&plan.plan_id, &w.admin).unwrap()
}

/// Head serialization in both canonical record form and CSV export.
fn head_bytes(w: &World, ds: &DatasetId) -> HeadBytes {
    let head = w.p.head_version(ds).unwrap();
    let canonical = common::snapshot_bytes(&w.p, ds, head, &w.admin);
    let csv = w.p.export_dataset(ds, VersionSel::Head, SourceFormat::Csv, &w.admin).unwrap();
    (head, canonical, csv)
}

fn scenario() -> Result<(Scenario, Vec<HeadBytes>), String> {
    let t = Instant::now();
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("weather.csv");
    weather_csv(&csv, 100, 11);
    let weather = w.dataset("weather", models::weather_schema(), &["date"]);
    let source = weather_source(&w, &weather, &csv);
    let report = import(&w, &source);
    ensure!(report.inserted == 100 && report.new_version == Some(2), "import wrote {} records", report.inserted);
    let catchment = w.catchment("catchment");
    let before = vec![head_bytes(&w, &weather), head_bytes(&w, &catchment)];

    let pins = vec![Pin { dataset_id: weather.clone(), version: 2 }, Pin { dataset_id: catchment.clone(), version: 2 }];
    let ws = w.p.create_working_set(pins, &w.admin).map_err(|e| e.to_string())?.ws_id;
    let inside = w.p.ws_read(&ws, &weather, None, &w.admin).unwrap();
    let ops: Vec<WsOp> = inside
        .iter()
        .take(30)
        .map(|r| {
            let mut v = r.values.clone();
            let wet = v["precip_mm"].as_f64().unwrap() + 25.0;
            v.insert("precip_mm".into(), Value::Float(wet));
            WsOp::Upsert { record: RecordInput { record_id: Some(r.record_id.clone()), values: v } }
        })
        .collect();
    w.p.ws_write(&ws, &weather, ops, &w.admin).map_err(|e| e.to_string())?;
    let diff = w.p.diff(&ws, &w.admin).unwrap();
    ensure!(diff[&weather].modified.len() == 30, "{} records modified in the working set", diff[&weather].modified.len());

    let spec = common::model_spec(&w.p, vec![JobInput::WorkingSet { working_set_id: ws.clone() }], None);
    let job = w.p.submit(spec, &w.admin).map_err(|e| e.to_string())?;
    let rec = w.wait(&job);
    ensure!(rec.state == JobState::Succeeded, "model job {:?}: {:?}", rec.state, rec.error);
    let set = w.p.working_set(&ws, &w.admin).unwrap();
    let result = set.base.iter().find(|p| p.dataset_id != weather && p.dataset_id != catchment).ok_or("no result pinned")?;
    let days = w.p.ws_read(&ws, &result.dataset_id, None, &w.admin).unwrap().len();
    ensure!(days == 100, "model wrote {days} days into the working set");

    w.p.discard(&ws, &w.admin).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    Ok((Scenario { w, dir, weather, catchment, source, job, elapsed }, before))
}

fn isolation() -> Verdict {
    let (s, before) = scenario()?;
    let after = vec![head_bytes(&s.w, &s.weather), head_bytes(&s.w, &s.catchment)];
    for (b, a) in before.iter().zip(&after) {
        ensure!(b.0 == a.0, "head moved from v{} to v{}", b.0, a.0);
        ensure!(b.1 == a.1, "canonical head serialization changed");
        ensure!(b.2 == a.2, "exported head bytes changed");
    }
    ensure!(s.elapsed < ISOLATION_BUDGET, "took {:?}, budget {:?}", s.elapsed, ISOLATION_BUDGET);
    Ok(format!(
        "heads byte-identical after 30 edits, a working-set model run and discard; {:?} < {:?}",
        s.elapsed, ISOLATION_BUDGET
    ))
}

// ---------------------------------------------------------------- merge

const IDS: [&str; 10] = ["r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7", "r8", "r9"];

fn counts_schema() -> Schema {
    Schema::new(vec![FieldDef::required("v", FieldKind::Integer)]).unwrap()
}

fn count_rec(id: &str, v: i64) -> RecordInput {
    RecordInput::with_id(id, values(&[("v", Value::Integer(v))]))
}

fn counts(w: &World, ds: &DatasetId) -> BTreeMap<String, i64> {
    w.p.read_records(ds, VersionSel::Head, None, &w.admin)
        .unwrap()
        .into_iter()
        .map(|r| (r.record_id.0, r.values["v"].as_f64().unwrap() as i64))
        .collect()
}

/// Random edits over the id space: each id is untouched, deleted or set.
fn random_edits(rng: &mut StdRng) -> BTreeMap<String, Cell> {
    let mut out = BTreeMap::new();
    for id in IDS {
        match rng.random_range(0..6) {
            0 => {
                out.insert(id.to_string(), None);
            }
            1 | 2 => {
                out.insert(id.to_string(), Some(rng.random_range(0..3)));
            }
            _ => {}
        }
    }
    out
}

fn edit_ops(edits: &BTreeMap<String, Cell>) -> Vec<WsOp> {
    edits
        .iter()
        .map(|(id, c)| match c {
            Some(v) => WsOp::Upsert { record: count_rec(id, *v) },
            None => WsOp::Delete { record_id: RecordId::from(id.as_str()) },
        })
        .collect()
}

fn merge_oracle() -> Verdict {
    let mut rng = StdRng::seed_from_u64(2);
    let mut conflicted = 0;
    let mut w = world();
    for i in 0..MERGE_INSTANCES {
        if i % 50 == 0 {
            w = world();
        }
        let mut base = BTreeMap::new();
        for id in IDS {
            if rng.random_bool(0.6) {
                base.insert(id.to_string(), rng.random_range(0..3i64));
            }
        }
        let theirs = random_edits(&mut rng);
        let ours = random_edits(&mut rng);
        let mut any_conflict = false;
        for (strategy, reference) in [
            (MergeStrategy::AbortOnConflict, RefStrategy::Abort),
            (MergeStrategy::Ours, RefStrategy::Ours),
            (MergeStrategy::Theirs, RefStrategy::Theirs),
        ] {
            let ds = w.dataset(&format!("counts-{i}-{strategy:?}"), counts_schema(), &[]);
            let seed: Vec<_> = base.iter().map(|(id, v)| count_rec(id, *v)).collect();
            let v = if seed.is_empty() { 1 } else { w.append(&ds, seed) };
            let pin = || vec![Pin { dataset_id: ds.clone(), version: v }];
            let mine = w.p.create_working_set(pin(), &w.admin).unwrap().ws_id;
            let other = w.p.create_working_set(pin(), &w.admin).unwrap().ws_id;
            if !theirs.is_empty() {
                w.p.ws_write(&other, &ds, edit_ops(&theirs), &w.admin).unwrap();
                w.p.merge(&other, MergeStrategy::AbortOnConflict, &w.admin).unwrap();
            }
            let head = counts(&w, &ds);
            let head_v = w.p.head_version(&ds).unwrap();
            if !ours.is_empty() {
                w.p.ws_write(&mine, &ds, edit_ops(&ours), &w.admin).unwrap();
            }
            let (want_conflicts, predicted) = oracles::three_way(&base, &head, &ours, reference);
            any_conflict |= !want_conflicts.is_empty();
            match (w.p.merge(&mine, strategy, &w.admin), predicted) {
                (Ok(r), Some(expect)) => {
                    let got = counts(&w, &ds);
                    ensure!(got == expect, "instance {i} {strategy:?}: head {got:?}, comparator {expect:?}");
                    let resolved: Vec<String> = r.conflicts_resolved.iter().map(|(_, id)| id.0.clone()).collect();
                    ensure!(resolved == want_conflicts, "instance {i} {strategy:?}: resolved {resolved:?} vs {want_conflicts:?}");
                }
                (Err(Error::MergeConflict(list)), None) => {
                    let got: Vec<String> = list.into_iter().map(|(_, id)| id.0).collect();
                    ensure!(got == want_conflicts, "instance {i}: conflicts {got:?} vs {want_conflicts:?}");
                    ensure!(w.p.head_version(&ds).unwrap() == head_v, "instance {i}: aborted merge moved the head");
                }
                (got, expect) => return Err(format!("instance {i} {strategy:?}: merge gave {got:?}, comparator {expect:?}")),
            }
        }
        conflicted += usize::from(any_conflict);
    }
    Ok(format!("{MERGE_INSTANCES} instances x 3 strategies agree with the comparator ({conflicted} had conflicts)"))
}

// --------------------------------------------------------------- pub-sub

fn random_lit(rng: &mut StdRng) -> Lit {
    match rng.random_range(0..3) {
        0 => Lit::Num(f64::from(rng.random_range(-4i32..5)) / 2.0),
        1 => Lit::Str((0..rng.random_range(0..3)).map(|_| if rng.random_bool(0.5) { 'a' } else { 'b' }).collect()),
        _ => Lit::Bool(rng.random_bool(0.5)),
    }
}

fn random_expr(rng: &mut StdRng, budget: usize) -> Expr {
    if budget == 1 || rng.random_bool(0.35) {
        let path = ["a", "b", "c", "d"][rng.random_range(0..4)].to_string();
        let op = oracles::OPS[rng.random_range(0..oracles::OPS.len())];
        return Expr::Cmp(path, op, random_lit(rng));
    }
    match rng.random_range(0..3) {
        0 => Expr::Not(Box::new(random_expr(rng, budget))),
        k => {
            let left = rng.random_range(1..budget);
            let items = vec![random_expr(rng, left), random_expr(rng, budget - left)];
            if k == 1 {
                Expr::And(items)
            } else {
                Expr::Or(items)
            }
        }
    }
}

fn to_lits(attrs: &Attrs) -> BTreeMap<String, Lit> {
    attrs
        .iter()
        .map(|(k, v)| {
            let lit = match v {
                Scalar::Num(n) => Lit::Num(*n),
                Scalar::Str(s) => Lit::Str(s.clone()),
                Scalar::Bool(b) => Lit::Bool(*b),
            };
            (k.clone(), lit)
        })
        .collect()
}

fn to_attrs(lits: &BTreeMap<String, Lit>) -> Attrs {
    lits.iter()
        .map(|(k, v)| {
            let s = match v {
                Lit::Num(n) => Scalar::Num(*n),
                Lit::Str(s) => Scalar::Str(s.clone()),
                Lit::Bool(b) => Scalar::Bool(*b),
            };
            (k.clone(), s)
        })
        .collect()
}

fn pubsub_oracle() -> Verdict {
    let mut rng = StdRng::seed_from_u64(3);
    let mut matched = 0;
    for i in 0..PREDICATE_PAIRS {
        let e = random_expr(&mut rng, 4);
        ensure!(oracles::comparisons(&e) <= 4, "generator exceeded four comparisons");
        let mut lits = BTreeMap::new();
        for k in ["a", "b", "c", "d"] {
            if rng.random_bool(0.7) {
                lits.insert(k.to_string(), random_lit(&mut rng));
            }
        }
        let text = oracles::render(&e);
        let p = Predicate::parse(&text).map_err(|err| format!("pair {i}: `{text}`: {err}"))?;
        let want = oracles::interpret(&e, &lits);
        ensure!(p.eval(&to_attrs(&lits)) == want, "pair {i}: `{text}` on {lits:?}: matcher disagrees");
        matched += usize::from(want);
    }

    let w = world();
    let a = w.dataset("a", common::readings_schema(), &["site"]);
    w.append(&a, vec![common::reading("s0", 1.0)]);
    let b = w.dataset("b", common::readings_schema(), &["site"]);
    let exprs = [
        Expr::Cmp("kind".into(), "==", Lit::Str("data_changed".into())),
        Expr::And(vec![
            Expr::Cmp("kind".into(), "==", Lit::Str("data_changed".into())),
            Expr::Cmp("version".into(), ">=", Lit::Num(3.0)),
        ]),
        Expr::Cmp("dataset_id".into(), "==", Lit::Str(b.0.clone())),
        Expr::Not(Box::new(Expr::Cmp("kind".into(), "prefix", Lit::Str("data".into())))),
    ];
    let mut subs = Vec::new();
    for e in &exprs {
        subs.push(w.p.subscribe(&w.admin, &oracles::render(e), Channel::Feed).map_err(|e| e.to_string())?);
    }
    let start = w.p.latest_event_id();
    for v in 0..3 {
        w.append(&a, vec![common::reading("s1", f64::from(v))]);
        w.append(&b, vec![common::reading("s2", f64::from(v))]);
    }
    w.p.create_project("credit-river", "", &w.admin).unwrap();
    w.append(&b, vec![common::reading("s3", 9.0)]);

    let mut expected: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for ev in w.p.events_since(start) {
        let lits = to_lits(&ev.match_attrs());
        let hits: Vec<String> =
            exprs.iter().zip(&subs).filter(|(e, _)| oracles::interpret(e, &lits)).map(|(_, s)| s.0.clone()).collect();
        if !hits.is_empty() {
            expected.insert(ev.event_id, hits);
        }
    }
    let feed = w.p.feed(&w.admin, 0, 1000);
    let got: BTreeMap<u64, Vec<String>> = feed
        .iter()
        .map(|f| {
            let mut ids: Vec<String> = f.subscription_ids.iter().map(|s| s.0.clone()).collect();
            ids.sort();
            (f.event.event_id, ids)
        })
        .collect();
    ensure!(got.len() == feed.len(), "an event appears twice in the feed");
    let mut want_sorted = expected.clone();
    want_sorted.values_mut().for_each(|v| v.sort());
    ensure!(got == want_sorted, "feed {got:?} vs reference {want_sorted:?}");
    ensure!(expected.keys().all(|id| *id > start), "replayed an event from before subscribing");
    let mut pairs = BTreeMap::new();
    for d in w.p.deliveries(&w.admin) {
        *pairs.entry((d.event_id, d.sub_id.0.clone())).or_insert(0) += 1;
    }
    ensure!(pairs.values().all(|n| *n == 1), "a (event, subscription) pair was delivered twice");
    let want_pairs: usize = expected.values().map(Vec::len).sum();
    ensure!(pairs.len() == want_pairs, "{} deliveries, reference {want_pairs}", pairs.len());
    let last = *got.keys().last().ok_or("no events delivered")?;
    ensure!(w.p.feed(&w.admin, last, 1000).is_empty(), "feed replays after its cursor");
    Ok(format!(
        "{PREDICATE_PAIRS} random pairs agree ({matched} matches); scripted run delivered {want_pairs} pairs over {} events exactly once",
        got.len()
    ))
}

// ------------------------------------------------------------- ingestion

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/discharge.csv");

fn discharge_schema() -> Schema {
    Schema::new(vec![
        FieldDef::required("station", FieldKind::String),
        FieldDef::required("date", FieldKind::Timestamp),
        FieldDef::required("flow_cms", FieldKind::Float),
        FieldDef::optional("stage_m", FieldKind::Float),
    ])
    .unwrap()
}

fn discharge_source(w: &World, ds: &DatasetId, uri: &str) -> SourceId {
    let new = NewSource {
        uri: uri.into(),
        format: SourceFormat::Csv,
        field_map: vec![
            FieldMapping::new("station", "station", Transform::Trim),
            FieldMapping::new("date", "date", Transform::ParseTimestamp("%Y-%m-%d".into())),
            FieldMapping::new("flow_cms", "flow_cms", Transform::ToFloat),
            FieldMapping::new("stage_m", "stage_m", Transform::ToFloat),
        ],
        key_fields: vec!["station".into(), "date".into()],
        target_dataset_id: ds.clone(),
    };
    w.p.register_source(new, &w.admin).unwrap()
}

fn conserved(r: &ienv::ingest::ImportReport) -> bool {
    r.fetched == r.inserted + r.updated + r.unchanged + r.rejected.len()
}

fn ingestion() -> Verdict {
    let w = world();
    let ds = w.dataset("gauges", discharge_schema(), &["station", "date"]);
    let src = discharge_source(&w, &ds, FIXTURE);
    let first = import(&w, &src);
    let second = import(&w, &src);
    ensure!(conserved(&first) && conserved(&second), "fixture counts do not add up");
    ensure!(first.new_version == Some(2), "first import made {:?}", first.new_version);
    ensure!(
        second.inserted == 0 && second.updated == 0 && second.new_version.is_none(),
        "second import inserted={} updated={} new_version={:?}",
        second.inserted,
        second.updated,
        second.new_version
    );

    let mut rng = StdRng::seed_from_u64(4);
    let dir = tempfile::tempdir().unwrap();
    let mut runs = 0;
    for i in 0..RANDOM_FIXTURES {
        let path = dir.path().join(format!("f{i}.csv"));
        let ds = w.dataset(&format!("gauges-{i}"), discharge_schema(), &["station", "date"]);
        let src = discharge_source(&w, &ds, path.to_str().unwrap());
        for _ in 0..2 {
            let rows = random_rows(&mut rng, &path);
            for _ in 0..2 {
                let r = import(&w, &src);
                runs += 1;
                ensure!(r.fetched == rows, "fixture {i}: fetched {} of {rows}", r.fetched);
                ensure!(
                    conserved(&r),
                    "fixture {i}: {} != {}+{}+{}+{}",
                    r.fetched,
                    r.inserted,
                    r.updated,
                    r.unchanged,
                    r.rejected.len()
                );
            }
        }
    }
    Ok(format!(
        "fixture rerun inserted=0 updated=0 new_version=none; conservation held on {runs} imports of {RANDOM_FIXTURES} random fixtures"
    ))
}

/// Writes a random gauge CSV with duplicates and bad cells; returns its row count.
fn random_rows(rng: &mut StdRng, path: &PathBuf) -> usize {
    let n = rng.random_range(0..40);
    let mut f = std::fs::File::create(path).unwrap();
    writeln!(f, "station,date,flow_cms,stage_m").unwrap();
    for _ in 0..n {
        let flow = if rng.random_bool(0.8) { format!("{:.1}", rng.random_range(0.0..500.0)) } else { "n/a".into() };
        let stage = if rng.random_bool(0.5) { format!("{:.2}", rng.random_range(0.0..3.0)) } else { String::new() };
        writeln!(f, "S{},2024-02-{:02},{flow},{stage}", rng.random_range(0..4), rng.random_range(1..29)).unwrap();
    }
    n
}

// --------------------------------------------------------- water balance

fn region() -> GeoRegion {
    common::region()
}

fn random_catchment(rng: &mut StdRng) -> Catchment {
    let uses: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| {
            (rng.random_range(0.05..1.0), rng.random_range(30.0..=100.0), rng.random_range(0.0..5.0), rng.random_range(0.0..1.0))
        })
        .collect();
    let total: f64 = uses.iter().map(|u| u.0).sum();
    let land_uses = uses
        .iter()
        .enumerate()
        .map(|(i, (share, cn, n, p))| LandUse {
            name: format!("use{i}"),
            fraction: share / total,
            curve_number: *cn,
            export_concentration_mg_per_l: [("n".to_string(), *n), ("p".to_string(), *p)].into_iter().collect(),
        })
        .collect();
    Catchment {
        catchment_id: "c".into(),
        area_ha: rng.random_range(1.0..5000.0),
        land_uses,
        soil_capacity_mm: rng.random_range(5.0..300.0),
        et_coefficient: rng.random_range(0.0..=1.0),
        region: region(),
    }
}

fn random_weather(rng: &mut StdRng) -> Vec<DailyWeather> {
    (0..DAYS)
        .map(|i| DailyWeather {
            date: Timestamp::from_millis(common::JAN_1_2024 + i as i64 * common::DAY_MS),
            precip_mm: if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..120.0) },
            pet_mm: rng.random_range(0.0..8.0),
        })
        .collect()
}

fn water_balance() -> Verdict {
    let mut rng = StdRng::seed_from_u64(5);
    let mut worst_residual: f64 = 0.0;
    let mut worst_cn100: f64 = 0.0;
    let mut worst_linearity: f64 = 0.0;
    for i in 0..CATCHMENTS {
        let c = random_catchment(&mut rng);
        let w = random_weather(&mut rng);
        let base = watershed::simulate(&c, &w, None).map_err(|e| format!("catchment {i}: {e}"))?;
        let mut prev = 0.0;
        for (day, s) in w.iter().zip(&base) {
            let residual = day.precip_mm - (s.runoff_mm + s.et_mm + s.percolation_mm + (s.soil_storage_mm - prev));
            worst_residual = worst_residual.max(residual.abs());
            prev = s.soil_storage_mm;
        }

        let mut paved = c.clone();
        paved.land_uses.iter_mut().for_each(|u| u.curve_number = 100.0);
        for (day, s) in w.iter().zip(watershed::simulate(&paved, &w, None).unwrap()) {
            worst_cn100 = worst_cn100.max((s.runoff_mm - day.precip_mm).abs());
        }

        let e = rng.random_range(0.0..=1.0);
        let treated = watershed::simulate(&c, &w, Some(&BmpScenario::uniform(&c, e))).unwrap();
        for nutrient in ["n", "p"] {
            let b: f64 = base.iter().map(|d| d.loads_kg[nutrient]).sum();
            let t: f64 = treated.iter().map(|d| d.loads_kg[nutrient]).sum();
            if b > 0.0 {
                worst_linearity = worst_linearity.max(((1.0 - t / b) - e).abs());
            }
        }
    }
    ensure!(worst_residual < MASS_TOLERANCE_MM, "worst daily residual {worst_residual:e} mm");
    ensure!(worst_cn100 < MASS_TOLERANCE_MM, "CN=100 runoff differs from rain by {worst_cn100:e} mm");
    ensure!(worst_linearity < LINEARITY_TOLERANCE, "load reduction off by {worst_linearity:e}");
    Ok(format!(
        "{CATCHMENTS} catchments x {DAYS} days: residual {worst_residual:.1e} < {MASS_TOLERANCE_MM:e} mm, CN=100 gap {worst_cn100:.1e}, reduction gap {worst_linearity:.1e} < {LINEARITY_TOLERANCE:e}"
    ))
}

// ---------------------------------------------------------------- access

const PRINCIPALS: [&str; 5] = ["u0", "u1", "u2", "t0", "t1"];
const ROLES: [&str; 4] = ["reader", "writer", "admin", "executor"];
/// `(kind, id, enclosing project)`.
const RESOURCES: [(&str, &str, Option<&str>); 5] = [
    ("dataset", "d0", Some("p0")),
    ("dataset", "d1", Some("p1")),
    ("project", "p0", None),
    ("project", "p1", None),
    ("platform", "platform", None),
];

fn random_policy(rng: &mut StdRng) -> RefPolicy {
    let resource = match rng.random_range(0..7) {
        5 => ("dataset", "*".to_owned()),
        6 => ("project", "*".to_owned()),
        k => {
            let (kind, id, _) = RESOURCES[k];
            (kind, id.to_owned())
        }
    };
    RefPolicy {
        principal: PRINCIPALS[rng.random_range(0..PRINCIPALS.len())].into(),
        role: ROLES[rng.random_range(0..ROLES.len())],
        resource,
        deny: rng.random_bool(0.3),
    }
}

fn to_policies(refs: &[RefPolicy]) -> Vec<Policy> {
    refs.iter()
        .enumerate()
        .map(|(i, p)| Policy {
            policy_id: format!("pol-{i:02}").into(),
            principal_id: p.principal.as_str().into(),
            role: match p.role {
                "reader" => Role::Reader,
                "writer" => Role::Writer,
                "admin" => Role::Admin,
                _ => Role::Executor,
            },
            resource: Resource::new(ResourceKind::parse(p.resource.0).unwrap(), p.resource.1.clone()),
            effect: if p.deny { Effect::Deny } else { Effect::Allow },
        })
        .collect()
}

/// Checks every (principal, action, resource) triple; returns how many allowed.
fn compare_table(refs: &[RefPolicy], teams: &BTreeMap<String, Vec<String>>) -> Result<usize, String> {
    let policies = to_policies(refs);
    let mut allowed = 0;
    for who in PRINCIPALS {
        let member_of = teams.get(who).cloned().unwrap_or_default();
        let mut subjects = vec![PrincipalId::new(who)];
        subjects.extend(member_of.iter().map(|t| PrincipalId::new(t.as_str())));
        for (kind, id, project) in RESOURCES {
            let chain = access::scope_chain(&Resource::new(ResourceKind::parse(kind).unwrap(), id), project);
            let mut scopes = vec![(kind, id.to_owned())];
            if let Some(p) = project {
                scopes.push(("project", p.to_owned()));
            }
            if kind != "platform" {
                scopes.push(("platform", "platform".to_owned()));
            }
            for a in oracles::ACTIONS {
                let action = Action::ALL.into_iter().find(|x| x.name() == a).unwrap();
                let got = access::evaluate(&policies, &subjects, action, &chain).allowed;
                let want = oracles::check(refs, who, &member_of, a, &scopes);
                ensure!(got == want, "{who} {a} {kind}:{id}: check {got}, reference {want} under {refs:?}");
                allowed += usize::from(got);
            }
        }
    }
    Ok(allowed)
}

fn acl_oracle() -> Verdict {
    let mut rng = StdRng::seed_from_u64(6);
    let triples = PRINCIPALS.len() * RESOURCES.len() * oracles::ACTIONS.len();
    let mut allowed = 0;
    for _ in 0..POLICY_TABLES {
        let refs: Vec<RefPolicy> = (0..rng.random_range(0..=10)).map(|_| random_policy(&mut rng)).collect();
        let teams: BTreeMap<String, Vec<String>> = (0..3)
            .map(|i| (format!("u{i}"), ["t0", "t1"].iter().filter(|_| rng.random_bool(0.5)).map(|t| t.to_string()).collect()))
            .collect();
        allowed += compare_table(&refs, &teams)?;
        ensure!(compare_table(&[], &teams)? == 0, "empty table allowed something");
    }
    Ok(format!("{POLICY_TABLES} random tables x {triples} triples agree ({allowed} allows); empty table denies all"))
}

// ------------------------------------------------------------ provenance

fn provenance() -> Verdict {
    let (s, _) = scenario()?;
    let w = &s.w;

    let head = w.p.head_version(&s.weather).unwrap();
    let ws = w.p.create_working_set(vec![Pin { dataset_id: s.weather.clone(), version: head }], &w.admin).unwrap().ws_id;
    let first = w.p.ws_read(&ws, &s.weather, None, &w.admin).unwrap().remove(0);
    let mut v = first.values.clone();
    v.insert("pet_mm".into(), Value::Float(9.5));
    w.p.ws_write(
        &ws,
        &s.weather,
        vec![WsOp::Upsert { record: RecordInput { record_id: Some(first.record_id), values: v } }],
        &w.admin,
    )
    .unwrap();
    let merged = w.p.merge(&ws, MergeStrategy::AbortOnConflict, &w.admin).map_err(|e| e.to_string())?;
    ensure!(merged.versions.get(&s.weather) == Some(&(head + 1)), "merge made {:?}", merged.versions);

    weather_csv(&s.dir.path().join("weather.csv"), 110, 12);
    let report = import(w, &s.source);
    ensure!(report.new_version == Some(head + 2), "second import made {:?}", report.new_version);

    let acts = w.p.activities();
    let mut producers: BTreeMap<String, usize> = BTreeMap::new();
    for a in &acts {
        ensure!(a.duration_ms == a.ended_at.millis() - a.started_at.millis(), "{} duration mismatch", a.activity_id);
        for o in a.outputs.iter().filter(|o| o.kind == EntityKind::DatasetVersion) {
            *producers.entry(o.key()).or_default() += 1;
        }
    }
    let mut versions = 0;
    for d in w.p.list_datasets(&DatasetFilter::default(), &w.admin) {
        for v in w.p.versions(&d.dataset_id).unwrap() {
            let key = EntityRef::dataset_version(&d.dataset_id.0, v.version).key();
            ensure!(producers.get(&key) == Some(&1), "{key} has {:?} producers", producers.get(&key));
            versions += 1;
        }
    }
    ensure!(producers.len() == versions, "activities reference versions that do not exist");

    let original =
        acts.iter().filter(|a| a.kind == ActivityKind::Import).min_by_key(|a| a.started_at).ok_or("no import activity")?;
    let up =
        w.p.lineage(&EntityRef::other(EntityKind::Job, &s.job.0), Direction::Upstream, None, &w.admin)
            .map_err(|e| e.to_string())?;
    ensure!(up.activities.iter().any(|a| a.activity_id == original.activity_id), "model lineage misses the original import");

    let rec = w.p.status(&s.job, &w.admin).unwrap();
    let runs: Vec<_> = acts.iter().filter(|a| a.kind == ActivityKind::JobRun).collect();
    ensure!(!runs.is_empty(), "no job_run activity");
    for run in &runs {
        ensure!(run.duration_ms == run.ended_at.millis() - run.started_at.millis(), "job_run duration mismatch");
    }
    let run = runs[0];
    ensure!(
        Some(run.started_at) == rec.started_at && Some(run.ended_at) == rec.ended_at,
        "job_run times differ from the job record"
    );
    let kinds: BTreeSet<_> = acts.iter().map(|a| format!("{:?}", a.kind)).collect();
    Ok(format!(
        "{versions} versions each with one producer across {} activities ({}); model lineage reaches {}",
        acts.len(),
        kinds.into_iter().collect::<Vec<_>>().join("/"),
        original.activity_id
    ))
}

// --------------------------------------------------------------- compute

fn compute_contract() -> Verdict {
    let mut cfg = Config::for_tests();
    cfg.compute.backends.push(Backend { name: "solo".into(), capacity: 1, kind: BackendKind::Local });
    let w = world_with(cfg);
    let schema = Schema::new(vec![FieldDef::optional("sleep_ms", FieldKind::Integer)]).unwrap();
    let algo =
        w.p.register_algorithm(
            NewAlgorithm { name: "probe".into(), version: "1.0.0".into(), kind: AlgorithmKind::Analysis, param_schema: schema },
            &w.admin,
        )
        .map_err(|e| e.to_string())?;
    let live = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let order = Arc::new(Mutex::new(Vec::new()));
    let (l, pk, o) = (live.clone(), peak.clone(), order.clone());
    let body = move |ctx: &JobContext| {
        let now = l.fetch_add(1, Ordering::SeqCst) + 1;
        pk.fetch_max(now, Ordering::SeqCst);
        o.lock().unwrap().push(ctx.job_id.clone());
        let ms = ctx.params.get("sleep_ms").and_then(Value::as_f64).unwrap_or(0.0) as u64;
        let until = Instant::now() + Duration::from_millis(ms);
        let mut cancelled = false;
        while Instant::now() < until && !cancelled {
            cancelled = ctx.is_cancelled();
            std::thread::sleep(Duration::from_millis(2));
        }
        l.fetch_sub(1, Ordering::SeqCst);
        if cancelled {
            return Err("cancelled".to_string());
        }
        let schema = Schema::new(vec![FieldDef::required("n", FieldKind::Integer)]).unwrap();
        let out = JobOutput {
            name: "probe-out".into(),
            schema,
            key_fields: vec![],
            region: None,
            records: vec![RecordInput::new(values(&[("n", Value::Integer(1))]))],
        };
        Ok(JobResult { outputs: vec![out], summary: None })
    };
    w.p.register_implementation("probe", "1.0.0", Arc::new(body));
    let input = w.dataset("seed", counts_schema(), &[]);
    w.append(&input, vec![count_rec("x", 0)]);
    let spec = |ms: i64| JobSpec {
        algo_id: algo.clone(),
        inputs: vec![common::pinned(&input)],
        params: values(&[("sleep_ms", Value::Integer(ms))]),
        backend_hint: None,
        priority: 0,
    };

    let jobs: Vec<JobId> = (0..3).map(|_| w.p.submit(spec(40), &w.admin).unwrap()).collect();
    for j in &jobs {
        let rec = w.wait(j);
        ensure!(rec.state == JobState::Succeeded, "{j}: {:?} {:?}", rec.state, rec.error);
    }
    let observed = peak.load(Ordering::SeqCst);
    ensure!(observed == 1, "observed {observed} concurrent bodies on a capacity-1 backend");
    ensure!(w.p.backend_stats("solo").max_running <= 1, "scheduler reports overlap");
    let started = order.lock().unwrap().clone();
    ensure!(started == jobs, "start order {started:?}, submitted {jobs:?}");

    let version_count = |w: &World| -> usize {
        w.p.list_datasets(&DatasetFilter::default(), &w.admin).iter().map(|d| w.p.versions(&d.dataset_id).unwrap().len()).sum()
    };
    let before = version_count(&w);
    let long = w.p.submit(spec(20_000), &w.admin).unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while w.p.status(&long, &w.admin).unwrap().state != JobState::Running {
        ensure!(Instant::now() < deadline, "long job never started");
        std::thread::sleep(Duration::from_millis(2));
    }
    w.p.cancel(&long, &w.admin).map_err(|e| e.to_string())?;
    let rec = w.wait(&long);
    ensure!(rec.state == JobState::Cancelled, "cancelled job ended {:?}", rec.state);
    ensure!(rec.outputs.is_empty(), "cancelled job has outputs {:?}", rec.outputs);
    ensure!(version_count(&w) == before, "cancelled job left a dataset version");
    Ok(format!("peak concurrency 1 over 3 jobs, FIFO start order; cancelled running job left no version ({before} total)"))
}

// ------------------------------------------------------------------- api

/// Every route the server mounts; `*` is one path segment.
const ROUTES: &[&str] = &[
    "GET /v1/health",
    "POST /v1/sessions",
    "GET /v1/projects",
    "POST /v1/projects",
    "GET /v1/datasets",
    "POST /v1/datasets",
    "GET /v1/datasets/*",
    "GET /v1/datasets/*/records",
    "POST /v1/datasets/*/records",
    "GET /v1/datasets/*/export",
    "GET /v1/sources",
    "POST /v1/sources",
    "POST /v1/sources/*/plan",
    "POST /v1/sources/*/import",
    "GET /v1/working-sets",
    "POST /v1/working-sets",
    "GET /v1/working-sets/*",
    "DELETE /v1/working-sets/*",
    "GET /v1/working-sets/*/records",
    "POST /v1/working-sets/*/records",
    "GET /v1/working-sets/*/diff",
    "POST /v1/working-sets/*/merge",
    "GET /v1/subscriptions",
    "POST /v1/subscriptions",
    "GET /v1/events/feed",
    "GET /v1/jobs",
    "POST /v1/jobs",
    "GET /v1/jobs/*",
    "POST /v1/jobs/*/cancel",
    "GET /v1/provenance/lineage",
    "GET /v1/provenance/cumulative",
    "GET /v1/algorithms",
    "POST /v1/models/watershed/simulate",
    "GET /v1/dashboard/*",
    "POST /v1/admin/principals",
    "POST /v1/admin/policies",
    "GET /v1/admin/backends",
    "POST /v1/admin/backends",
];

fn route_of(method: &str, path: &str) -> Option<&'static str> {
    let path = path.split('?').next().unwrap();
    let segs: Vec<&str> = path.split('/').collect();
    ROUTES.iter().copied().find(|r| {
        let (m, pattern) = r.split_once(' ').unwrap();
        let pat: Vec<&str> = pattern.split('/').collect();
        m == method && pat.len() == segs.len() && pat.iter().zip(&segs).all(|(p, s)| *p == "*" || p == s)
    })
}

#[derive(Clone)]
struct Client {
    base: String,
    token: Option<String>,
}

struct Reply {
    status: u16,
    body: Json,
}

/// Shape errors in an envelope, or `None` when it is well formed.
fn envelope_problem(status: u16, header_id: Option<&str>, body: &Json) -> Option<String> {
    let id = body["request_id"].as_str();
    if id.is_none() {
        return Some("request_id missing".into());
    }
    if header_id.is_some() && header_id != id {
        return Some("x-request-id differs from request_id".into());
    }
    let obj = body.as_object()?;
    if status == 200 {
        if body["ok"] != true || !obj.contains_key("data") || obj.contains_key("error") {
            return Some("success envelope must carry ok=true and data only".into());
        }
    } else {
        let e = &body["error"];
        if body["ok"] != false || obj.contains_key("data") || !e["code"].is_string() || !e["message"].is_string() {
            return Some("error envelope must carry ok=false and error{code, message}".into());
        }
        if !e.as_object().is_some_and(|o| o.contains_key("detail")) {
            return Some("error envelope lacks detail".into());
        }
    }
    None
}

impl Client {
    fn call(&self, method: &str, path: &str, body: Option<&Json>) -> Result<Reply, String> {
        let mut req = ureq::request(method, &format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.set("authorization", &format!("Bearer {t}"));
        }
        let resp = match body {
            Some(b) => req.send_json(b.clone()),
            None => req.call(),
        };
        let resp = match resp {
            Ok(r) | Err(ureq::Error::Status(_, r)) => r,
            Err(e) => return Err(format!("{method} {path}: {e}")),
        };
        let status = resp.status();
        let header = resp.header("x-request-id").map(str::to_owned);
        let body: Json = resp.into_json().map_err(|e| format!("{method} {path}: body is not JSON: {e}"))?;
        if let Some(p) = envelope_problem(status, header.as_deref(), &body) {
            return Err(format!("{method} {path}: {p}: {body}"));
        }
        Ok(Reply { status, body })
    }
}

/// Issues requests, checks status and envelope, and tallies route coverage.
struct Probe {
    admin: Client,
    anon: Client,
    stranger: Client,
    hits: BTreeMap<&'static str, BTreeSet<u16>>,
    checks: usize,
}

#[derive(Clone, Copy)]
enum As {
    Admin,
    Anon,
    Stranger,
}

impl Probe {
    fn expect(&mut self, who: As, method: &str, path: &str, body: Option<Json>, want: u16) -> Result<Json, String> {
        let route = route_of(method, path).ok_or_else(|| format!("{method} {path} is not a route"))?;
        let client = match who {
            As::Admin => &self.admin,
            As::Anon => &self.anon,
            As::Stranger => &self.stranger,
        };
        let r = client.call(method, path, body.as_ref())?;
        if r.status != want {
            return Err(format!("{method} {path}: status {} (wanted {want}): {}", r.status, r.body));
        }
        self.hits.entry(route).or_default().insert(want);
        self.checks += 1;
        Ok(if want == 200 { r.body["data"].clone() } else { r.body["error"].clone() })
    }

    fn ok(&mut self, who: As, method: &str, path: &str, body: Option<Json>) -> Result<Json, String> {
        self.expect(who, method, path, body, 200)
    }
}

fn api_parity() -> Verdict {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let weather = w.weather("weather", 20, 1);
    let catchment = w.catchment("catchment");
    w.user("sam");
    let csv = dir.path().join("w.csv");
    std::fs::write(&csv, "date,precip_mm,pet_mm\n2024-03-01,4.0,2.0\n2024-03-02,0.0,2.5\n").unwrap();
    let broken = weather_source(&w, &weather, &dir.path().join("absent.csv"));
    let spec = common::model_spec(&w.p, vec![common::pinned(&weather), common::pinned(&catchment)], None);
    let done = w.wait(&w.p.submit(spec, &w.admin).unwrap());
    ensure!(done.state == JobState::Succeeded, "seed job {:?}", done.error);
    let project = w.project.0.clone();

    let server = ienv::api::spawn(w.p.clone(), "127.0.0.1:0").map_err(|e| e.to_string())?;
    let anon = Client { base: server.url(), token: None };
    let login = |name: &str| -> Result<Client, String> {
        let r = anon.call("POST", "/v1/sessions", Some(&json!({ "name": name, "secret": SECRET })))?;
        Ok(Client { base: anon.base.clone(), token: r.body["data"]["token"].as_str().map(str::to_owned) })
    };
    let mut p = Probe { admin: login("admin")?, stranger: login("sam")?, anon: anon.clone(), hits: BTreeMap::new(), checks: 0 };
    use As::{Admin, Anon, Stranger};
    let schema = json!([
        { "name": "date", "kind": "timestamp", "required": true },
        { "name": "precip_mm", "kind": "float", "required": true },
        { "name": "pet_mm", "kind": "float", "required": true },
    ]);
    let region = json!({ "min_lon": -80.6, "min_lat": 43.3, "max_lon": -79.9, "max_lat": 43.9 });
    let day = |d: u32, precip: f64| json!({ "values": { "date": format!("2024-05-{d:02}T00:00:00Z"), "precip_mm": precip, "pet_mm": 2.0 } });

    // sessions, health, projects
    p.ok(Anon, "GET", "/v1/health", None)?;
    p.ok(Anon, "POST", "/v1/sessions", Some(json!({ "name": "admin", "secret": SECRET })))?;
    p.expect(Anon, "POST", "/v1/sessions", Some(json!({ "name": "admin", "secret": "nope" })), 401)?;
    p.expect(Anon, "POST", "/v1/sessions", Some(json!({ "name": 3 })), 422)?;
    p.ok(Admin, "GET", "/v1/projects", None)?;
    p.ok(Admin, "POST", "/v1/projects", Some(json!({ "name": "credit-river" })))?;
    p.expect(Anon, "POST", "/v1/projects", Some(json!({ "name": "x" })), 401)?;
    p.expect(Admin, "POST", "/v1/projects", Some(json!({ "name": "credit-river" })), 409)?;
    p.expect(Admin, "POST", "/v1/projects", Some(json!({ "nome": 1 })), 422)?;

    // datasets
    let new_ds = |name: &str, study: &str| json!({ "name": name, "study_type": study, "schema": schema, "project_id": project, "region": region, "key_fields": ["date"], "public": false });
    p.ok(Admin, "GET", "/v1/datasets", None)?;
    p.ok(Admin, "GET", "/v1/datasets?format=geojson&bbox=-81,43,-79,44", None)?;
    p.expect(Admin, "GET", "/v1/datasets?bbox=1,2,3", None, 422)?;
    p.expect(Admin, "GET", "/v1/datasets?limit=0", None, 422)?;
    let gauges =
        p.ok(Admin, "POST", "/v1/datasets", Some(new_ds("gauges", "discharge")))?["dataset_id"].as_str().unwrap().to_owned();
    p.expect(Anon, "POST", "/v1/datasets", Some(new_ds("g2", "discharge")), 401)?;
    p.expect(Stranger, "POST", "/v1/datasets", Some(new_ds("g2", "discharge")), 403)?;
    p.expect(Admin, "POST", "/v1/datasets", Some(new_ds("gauges", "discharge")), 409)?;
    p.expect(Admin, "POST", "/v1/datasets", Some(new_ds("g3", "astrology")), 422)?;
    p.ok(Admin, "GET", &format!("/v1/datasets/{weather}"), None)?;
    p.expect(Admin, "GET", "/v1/datasets/ds-missing", None, 404)?;
    p.expect(Stranger, "GET", &format!("/v1/datasets/{weather}"), None, 403)?;
    p.ok(Admin, "GET", &format!("/v1/datasets/{weather}/records?filter=precip_mm%20%3E%200"), None)?;
    p.expect(Stranger, "GET", &format!("/v1/datasets/{weather}/records"), None, 403)?;
    p.expect(Admin, "GET", "/v1/datasets/ds-missing/records", None, 404)?;
    p.expect(Admin, "GET", &format!("/v1/datasets/{weather}/records?version=99"), None, 404)?;
    p.expect(Admin, "GET", &format!("/v1/datasets/{weather}/records?filter=precip_mm%20%3E"), None, 422)?;
    let path = format!("/v1/datasets/{gauges}/records");
    p.ok(Admin, "POST", &path, Some(json!({ "base_version": 1, "records": [day(1, 3.0)] })))?;
    p.expect(Anon, "POST", &path, Some(json!({ "base_version": 2, "records": [day(2, 3.0)] })), 401)?;
    p.expect(Stranger, "POST", &path, Some(json!({ "base_version": 2, "records": [day(2, 3.0)] })), 403)?;
    let stale = p.expect(Admin, "POST", &path, Some(json!({ "base_version": 1, "records": [day(2, 3.0)] })), 409)?;
    ensure!(stale["code"] == "stale_base" && stale["detail"]["head"] == 2, "stale detail {stale}");
    let bad = json!({ "base_version": 2, "records": [{ "values": { "date": "2024-05-03T00:00:00Z", "precip_mm": "lots", "pet_mm": 1.0 } }] });
    p.expect(Admin, "POST", &path, Some(bad), 422)?;
    p.expect(Admin, "POST", "/v1/datasets/ds-missing/records", Some(json!({ "base_version": 1, "records": [] })), 404)?;
    p.ok(Admin, "GET", &format!("/v1/datasets/{weather}/export?format=json-lines"), None)?;
    p.expect(Admin, "GET", &format!("/v1/datasets/{weather}/export?format=xlsx"), None, 422)?;
    p.expect(Admin, "GET", "/v1/datasets/ds-missing/export", None, 404)?;
    p.expect(Stranger, "GET", &format!("/v1/datasets/{weather}/export"), None, 403)?;

    // ingestion
    let source = |target: &str| {
        json!({
            "uri": csv.to_str().unwrap(), "format": "csv", "key_fields": ["date"], "target_dataset_id": target,
            "field_map": [
                { "column": "date", "field": "date", "transform": { "parse_timestamp": "%Y-%m-%d" } },
                { "column": "precip_mm", "field": "precip_mm", "transform": "to_float" },
                { "column": "pet_mm", "field": "pet_mm", "transform": "to_float" },
            ],
        })
    };
    p.ok(Admin, "GET", "/v1/sources", None)?;
    let src = p.ok(Admin, "POST", "/v1/sources", Some(source(&weather.0)))?["source_id"].as_str().unwrap().to_owned();
    p.expect(Anon, "POST", "/v1/sources", Some(source(&weather.0)), 401)?;
    p.expect(Stranger, "POST", "/v1/sources", Some(source(&weather.0)), 403)?;
    p.expect(Admin, "POST", "/v1/sources", Some(source("ds-missing")), 404)?;
    p.expect(Admin, "POST", "/v1/sources", Some(json!({ "uri": 1 })), 422)?;
    p.ok(Admin, "POST", &format!("/v1/sources/{src}/plan"), Some(json!({})))?;
    p.expect(Anon, "POST", &format!("/v1/sources/{src}/plan"), Some(json!({})), 401)?;
    p.expect(Admin, "POST", "/v1/sources/src-missing/plan", Some(json!({})), 404)?;
    let report = p.ok(Admin, "POST", &format!("/v1/sources/{src}/import"), Some(json!({})))?;
    ensure!(report["inserted"] == 2, "import report {report}");
    p.expect(Stranger, "POST", &format!("/v1/sources/{src}/import"), Some(json!({})), 403)?;
    p.expect(Admin, "POST", "/v1/sources/src-missing/import", Some(json!({})), 404)?;
    p.expect(Admin, "POST", &format!("/v1/sources/{src}/import"), Some(json!({ "plan_id": "plan-missing" })), 404)?;
    p.expect(Admin, "POST", &format!("/v1/sources/{broken}/import"), Some(json!({})), 500)?;

    // working sets
    let pins = json!({ "pins": [{ "dataset_id": weather }] });
    let ws = p.ok(Admin, "POST", "/v1/working-sets", Some(pins.clone()))?["ws_id"].as_str().unwrap().to_owned();
    p.expect(Anon, "POST", "/v1/working-sets", Some(pins.clone()), 401)?;
    p.expect(Stranger, "POST", "/v1/working-sets", Some(pins.clone()), 403)?;
    p.expect(Admin, "POST", "/v1/working-sets", Some(json!({ "pins": [{ "dataset_id": "ds-missing" }] })), 404)?;
    p.expect(Admin, "POST", "/v1/working-sets", Some(json!({ "pins": "all" })), 422)?;
    p.ok(Admin, "GET", "/v1/working-sets", None)?;
    p.expect(Anon, "GET", "/v1/working-sets", None, 401)?;
    p.ok(Admin, "GET", &format!("/v1/working-sets/{ws}"), None)?;
    p.expect(Stranger, "GET", &format!("/v1/working-sets/{ws}"), None, 403)?;
    p.expect(Admin, "GET", "/v1/working-sets/ws-missing", None, 404)?;
    p.ok(Admin, "GET", &format!("/v1/working-sets/{ws}/records?dataset={weather}"), None)?;
    p.expect(Admin, "GET", &format!("/v1/working-sets/{ws}/records"), None, 422)?;
    p.expect(Stranger, "GET", &format!("/v1/working-sets/{ws}/records?dataset={weather}"), None, 403)?;
    let upsert = |ds: &str, d: u32| json!({ "dataset_id": ds, "ops": [{ "op": "upsert", "values": day(d, 7.0)["values"] }] });
    let wpath = format!("/v1/working-sets/{ws}/records");
    p.ok(Admin, "POST", &wpath, Some(upsert(&weather.0, 20)))?;
    p.expect(Admin, "POST", &wpath, Some(upsert(&gauges, 20)), 422)?;
    p.expect(
        Admin,
        "POST",
        &wpath,
        Some(json!({ "dataset_id": weather, "ops": [{ "op": "upsert", "values": { "date": "x" } }] })),
        422,
    )?;
    p.expect(Stranger, "POST", &wpath, Some(upsert(&weather.0, 21)), 403)?;
    p.expect(Admin, "POST", "/v1/working-sets/ws-missing/records", Some(upsert(&weather.0, 21)), 404)?;
    p.ok(Admin, "GET", &format!("/v1/working-sets/{ws}/diff"), None)?;
    p.expect(Admin, "GET", "/v1/working-sets/ws-missing/diff", None, 404)?;
    p.expect(Anon, "POST", &format!("/v1/working-sets/{ws}/merge"), Some(json!({})), 401)?;
    p.expect(Admin, "POST", &format!("/v1/working-sets/{ws}/merge"), Some(json!({ "strategy": "both" })), 422)?;
    p.ok(Admin, "POST", &format!("/v1/working-sets/{ws}/merge"), Some(json!({})))?;
    p.expect(Admin, "POST", &wpath, Some(upsert(&weather.0, 22)), 409)?;
    p.expect(Admin, "DELETE", &format!("/v1/working-sets/{ws}"), None, 409)?;

    let ws_c = p.ok(Admin, "POST", "/v1/working-sets", Some(pins.clone()))?["ws_id"].as_str().unwrap().to_owned();
    p.ok(Admin, "POST", &format!("/v1/working-sets/{ws_c}/records"), Some(upsert(&weather.0, 23)))?;
    let head = w.p.head_version(&weather).unwrap();
    let clash = json!({ "base_version": head, "records": [day(23, 1.0)] });
    p.ok(Admin, "POST", &format!("/v1/datasets/{weather}/records"), Some(clash))?;
    let conflict = p.expect(Admin, "POST", &format!("/v1/working-sets/{ws_c}/merge"), Some(json!({})), 409)?;
    let list = conflict["detail"]["conflicts"].as_array().ok_or("conflict detail lacks a list")?;
    ensure!(
        list.len() == 1 && list[0]["dataset_id"] == weather.0.as_str() && list[0]["record_id"].is_string(),
        "conflicts {list:?}"
    );
    p.expect(Stranger, "DELETE", &format!("/v1/working-sets/{ws_c}"), None, 403)?;
    p.ok(Admin, "DELETE", &format!("/v1/working-sets/{ws_c}"), None)?;
    p.expect(Admin, "DELETE", "/v1/working-sets/ws-missing", None, 404)?;

    // notifications
    p.ok(Admin, "POST", "/v1/subscriptions", Some(json!({ "predicate": "kind == \"data_changed\"" })))?;
    p.expect(Admin, "POST", "/v1/subscriptions", Some(json!({ "predicate": "version >" })), 422)?;
    p.expect(Anon, "POST", "/v1/subscriptions", Some(json!({ "predicate": "version > 1" })), 401)?;
    p.ok(Admin, "GET", "/v1/subscriptions", None)?;
    p.ok(Admin, "GET", "/v1/events/feed?since=0&limit=5", None)?;
    p.expect(Admin, "GET", "/v1/events/feed?since=soon", None, 422)?;

    // compute
    p.ok(
        Admin,
        "POST",
        "/v1/admin/backends",
        Some(json!({ "name": "slow", "capacity": 1, "kind": { "type": "external-stub", "latency_ms": 30000 } })),
    )?;
    let params = json!({ "area_ha": 500, "soil_capacity_mm": 100, "et_coefficient": 0.7, "catchment_id": "mill-creek" });
    let inputs = json!([{ "type": "dataset", "dataset_id": weather }, { "type": "dataset", "dataset_id": catchment }]);
    let job_body = |extra: Json| {
        let mut b = json!({ "algo_name": models::WATER_BALANCE, "inputs": inputs, "params": params });
        b.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
        b
    };
    let slow = p.ok(Admin, "POST", "/v1/jobs", Some(job_body(json!({ "backend_hint": "slow" }))))?["job_id"]
        .as_str()
        .unwrap()
        .to_owned();
    p.expect(Anon, "POST", "/v1/jobs", Some(job_body(json!({}))), 401)?;
    p.expect(Stranger, "POST", "/v1/jobs", Some(job_body(json!({}))), 403)?;
    p.expect(Admin, "POST", "/v1/jobs", Some(job_body(json!({ "params": {} }))), 422)?;
    p.expect(Admin, "POST", "/v1/jobs", Some(job_body(json!({ "algo_name": "tea-leaves" }))), 404)?;
    p.expect(Admin, "POST", "/v1/jobs", Some(job_body(json!({ "backend_hint": "cray" }))), 404)?;
    p.ok(Admin, "GET", "/v1/jobs", None)?;
    p.ok(Admin, "GET", &format!("/v1/jobs/{}", done.job_id), None)?;
    p.expect(Admin, "GET", "/v1/jobs/job-missing", None, 404)?;
    p.expect(Stranger, "GET", &format!("/v1/jobs/{}", done.job_id), None, 403)?;
    p.ok(Admin, "POST", &format!("/v1/jobs/{slow}/cancel"), Some(json!({})))?;
    let slow_id = JobId::new(slow.clone());
    ensure!(w.wait(&slow_id).state == JobState::Cancelled, "slow job was not cancelled");
    p.expect(Admin, "POST", &format!("/v1/jobs/{slow}/cancel"), Some(json!({})), 409)?;
    p.expect(Admin, "POST", "/v1/jobs/job-missing/cancel", Some(json!({})), 404)?;
    p.expect(Anon, "POST", &format!("/v1/jobs/{slow}/cancel"), Some(json!({})), 401)?;

    // provenance, algorithms, models, dashboard
    p.ok(Admin, "GET", &format!("/v1/provenance/lineage?id={weather}&version=2&direction=downstream"), None)?;
    p.expect(Admin, "GET", &format!("/v1/provenance/lineage?id={weather}&direction=sideways"), None, 422)?;
    p.expect(Admin, "GET", "/v1/provenance/lineage?id=ds-missing&version=1", None, 404)?;
    p.expect(Stranger, "GET", &format!("/v1/provenance/lineage?id={weather}&version=2"), None, 403)?;
    p.ok(Admin, "GET", "/v1/provenance/cumulative?bbox=-81,43,-79,44&algo=water-balance", None)?;
    p.expect(Admin, "GET", "/v1/provenance/cumulative?bbox=north", None, 422)?;
    p.ok(Anon, "GET", "/v1/algorithms", None)?;
    let model = |fraction: f64| {
        json!({
            "catchment": {
                "catchment_id": "c1", "area_ha": 100.0, "soil_capacity_mm": 100.0, "et_coefficient": 0.8, "region": region,
                "land_uses": [{ "use": "cropland", "fraction": fraction, "curve_number": 80.0, "export_concentration_mg_per_l": { "n": 4.0 } }],
            },
            "weather": [{ "date": "2024-05-01T00:00:00Z", "precip_mm": 40.0, "pet_mm": 3.0 }],
        })
    };
    p.ok(Admin, "POST", "/v1/models/watershed/simulate", Some(model(1.0)))?;
    p.expect(Admin, "POST", "/v1/models/watershed/simulate", Some(model(0.5)), 422)?;
    p.expect(Anon, "POST", "/v1/models/watershed/simulate", Some(model(1.0)), 401)?;
    p.ok(Admin, "GET", &format!("/v1/dashboard/{project}"), None)?;
    p.expect(Anon, "GET", &format!("/v1/dashboard/{project}"), None, 401)?;
    p.expect(Stranger, "GET", &format!("/v1/dashboard/{project}"), None, 403)?;
    p.expect(Admin, "GET", "/v1/dashboard/prj-missing", None, 404)?;

    // administration
    let rita = p.ok(Admin, "POST", "/v1/admin/principals", Some(json!({ "name": "rita", "kind": "user", "secret": SECRET })))?;
    let rita = rita["principal_id"].as_str().unwrap().to_owned();
    p.expect(Stranger, "POST", "/v1/admin/principals", Some(json!({ "name": "x", "kind": "user" })), 403)?;
    p.expect(Anon, "POST", "/v1/admin/principals", Some(json!({ "name": "x", "kind": "user" })), 401)?;
    p.expect(Admin, "POST", "/v1/admin/principals", Some(json!({ "name": "rita", "kind": "user" })), 409)?;
    p.expect(Admin, "POST", "/v1/admin/principals", Some(json!({ "name": "y", "kind": "robot" })), 422)?;
    let grant = |who: &str, role: &str| json!({ "principal_id": who, "role": role, "resource": { "kind": "project", "id": project }, "effect": "allow" });
    p.ok(Admin, "POST", "/v1/admin/policies", Some(grant(&rita, "reader")))?;
    p.expect(Stranger, "POST", "/v1/admin/policies", Some(grant(&rita, "admin")), 403)?;
    p.expect(Admin, "POST", "/v1/admin/policies", Some(grant("usr-missing", "reader")), 404)?;
    p.expect(Admin, "POST", "/v1/admin/policies", Some(grant(&rita, "overlord")), 422)?;
    p.ok(Admin, "GET", "/v1/admin/backends", None)?;
    p.expect(Anon, "GET", "/v1/admin/backends", None, 401)?;
    p.expect(Admin, "POST", "/v1/admin/backends", Some(json!({ "name": "slow", "capacity": 1 })), 409)?;
    p.expect(Admin, "POST", "/v1/admin/backends", Some(json!({ "name": "zero", "capacity": 0 })), 422)?;
    p.expect(Stranger, "POST", "/v1/admin/backends", Some(json!({ "name": "hpc", "capacity": 4 })), 403)?;

    let missing: Vec<&str> = ROUTES.iter().copied().filter(|r| !p.hits.get(r).is_some_and(|s| s.contains(&200))).collect();
    ensure!(missing.is_empty(), "routes without a success case: {missing:?}");
    let unknown = anon.call("GET", "/v1/nowhere", None)?;
    ensure!(unknown.status == 404, "unknown route gave {}", unknown.status);
    let mut by_status: BTreeMap<u16, usize> = BTreeMap::new();
    for codes in p.hits.values() {
        for c in codes {
            *by_status.entry(*c).or_default() += 1;
        }
    }
    let tally: Vec<String> = by_status.iter().map(|(c, n)| format!("{c}x{n}")).collect();
    Ok(format!(
        "{} routes, {} checks, envelopes well formed; route-status pairs {}; served by the ienv crate alone",
        ROUTES.len(),
        p.checks,
        tally.join(" ")
    ))
}
