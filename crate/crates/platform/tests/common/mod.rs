//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::time::Duration;

use ienv::catalog::{NewDataset, RecordInput};
use ienv::compute::{JobInput, JobRecord, JobSpec};
use ienv::models;
use ienv::{Config, Platform};
use ienv_core::access::PrincipalKind;
use ienv_core::jobs::Backend;
use ienv_core::schema::{FieldDef, FieldKind};
use ienv_core::watershed::BmpScenario;
use ienv_core::{DatasetId, GeoRegion, JobId, PrincipalId, ProjectId, Schema, Timestamp, Value};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const SECRET: &str = "correct horse";
pub const DAY_MS: i64 = 86_400_000;
/// 2024-01-01T00:00:00Z.
pub const JAN_1_2024: i64 = 1_704_067_200_000;

pub fn region() -> GeoRegion {
    GeoRegion { min_lon: -80.6, min_lat: 43.3, max_lon: -79.9, max_lat: 43.9 }
}

pub struct World {
    pub p: Platform,
    pub admin: PrincipalId,
    pub project: ProjectId,
}

pub fn config() -> Config {
    let mut cfg = Config::for_tests();
    cfg.compute.backends.push(Backend { name: "local".into(), capacity: 2, kind: Default::default() });
    cfg
}

pub fn world() -> World {
    world_with(config())
}

pub fn world_with(cfg: Config) -> World {
    let p = Platform::new(cfg).unwrap();
    let admin = p.create_principal("admin", PrincipalKind::User, Some(SECRET), &[]).unwrap();
    p.make_platform_admin(&admin).unwrap();
    let project = p.create_project("grand-river", "Grand River watershed", &admin).unwrap().project_id;
    World { p, admin, project }
}

impl World {
    pub fn user(&self, name: &str) -> PrincipalId {
        self.p.create_principal(name, PrincipalKind::User, Some(SECRET), &[]).unwrap()
    }

    pub fn dataset(&self, name: &str, schema: Schema, key_fields: &[&str]) -> DatasetId {
        let new = NewDataset {
            name: name.into(),
            study_type: "discharge".into(),
            schema,
            project_id: self.project.clone(),
            region: region(),
            key_fields: key_fields.iter().map(|s| s.to_string()).collect(),
            public: false,
        };
        self.p.create_dataset(new, &self.admin).unwrap().dataset_id
    }

    pub fn append(&self, ds: &DatasetId, records: Vec<RecordInput>) -> u64 {
        let head = self.p.head_version(ds).unwrap();
        self.p.append_records(ds, head, records, &self.admin).unwrap().version
    }

    /// A weather dataset holding `days` days from 2024-01-01.
    pub fn weather(&self, name: &str, days: usize, seed: u64) -> DatasetId {
        let ds = self.dataset(name, models::weather_schema(), &["date"]);
        self.append(&ds, weather_rows(days, seed));
        ds
    }

    /// A three-land-use catchment table with nitrogen and phosphorus.
    pub fn catchment(&self, name: &str) -> DatasetId {
        let ds = self.dataset(name, models::catchment_schema(&["n", "p"]), &["land_use"]);
        self.append(&ds, catchment_rows());
        ds
    }

    pub fn wait(&self, job: &JobId) -> JobRecord {
        self.p.wait_job(job, Duration::from_secs(20)).unwrap()
    }
}

pub fn values(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

pub fn weather_rows(days: usize, seed: u64) -> Vec<RecordInput> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..days)
        .map(|d| {
            let precip = if rng.random_bool(0.4) { rng.random_range(0.5..60.0) } else { 0.0 };
            RecordInput::new(values(&[
                ("date", Value::Timestamp(Timestamp(JAN_1_2024 + d as i64 * DAY_MS))),
                ("precip_mm", Value::Float(precip)),
                ("pet_mm", Value::Float(rng.random_range(0.0..6.0))),
            ]))
        })
        .collect()
}

pub fn catchment_rows() -> Vec<RecordInput> {
    [("forest", 0.5, 60.0, 0.8, 0.02), ("cropland", 0.3, 78.0, 4.5, 0.3), ("urban", 0.2, 92.0, 2.0, 0.25)]
        .into_iter()
        .map(|(u, f, cn, n, p)| {
            RecordInput::new(values(&[
                ("land_use", Value::String(u.into())),
                ("fraction", Value::Float(f)),
                ("curve_number", Value::Float(cn)),
                ("n_mg_l", Value::Float(n)),
                ("p_mg_l", Value::Float(p)),
            ]))
        })
        .collect()
}

pub fn model_params(scenario: Option<&BmpScenario>) -> BTreeMap<String, Value> {
    let mut params = values(&[
        ("area_ha", Value::Float(1200.0)),
        ("soil_capacity_mm", Value::Float(120.0)),
        ("et_coefficient", Value::Float(0.8)),
        ("catchment_id", Value::String("upper-grand".into())),
    ]);
    if let Some(s) = scenario {
        params.insert("scenario".into(), Value::String(serde_json::to_string(s).unwrap()));
    }
    params
}

pub fn model_spec(p: &Platform, inputs: Vec<JobInput>, scenario: Option<&BmpScenario>) -> JobSpec {
    let algo = p.algorithm_by_name(models::WATER_BALANCE, None).unwrap();
    JobSpec { algo_id: algo.algo_id, inputs, params: model_params(scenario), backend_hint: None, priority: 0 }
}

pub fn pinned(ds: &DatasetId) -> JobInput {
    JobInput::Dataset { dataset_id: ds.clone(), version: None }
}

/// A `site → reading` schema for generic catalog tests.
pub fn readings_schema() -> Schema {
    Schema::new(vec![
        FieldDef::required("site", FieldKind::String),
        FieldDef::required("reading", FieldKind::Float),
        FieldDef::optional("note", FieldKind::String),
    ])
    .unwrap()
}

pub fn reading(site: &str, v: f64) -> RecordInput {
    RecordInput::new(values(&[("site", Value::String(site.into())), ("reading", Value::Float(v))]))
}

/// Canonical bytes of a whole snapshot, in record-id order.
pub fn snapshot_bytes(p: &Platform, ds: &DatasetId, version: u64, actor: &PrincipalId) -> String {
    p.read_records(ds, ienv::catalog::VersionSel::At(version), None, actor)
        .unwrap()
        .iter()
        .map(|r| r.canonical_json())
        .collect::<Vec<_>>()
        .join("\n")
}
