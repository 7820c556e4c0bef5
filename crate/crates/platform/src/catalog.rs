//! Projects, datasets, version commits, record reads and the algorithm
//! catalog.

use std::collections::BTreeMap;
use std::str::FromStr;

use ienv_core::access::{Action, Effect, Policy, Resource, ResourceKind, Role};
use ienv_core::catalog::{find_study_type, is_semver, AlgorithmEntry, AlgorithmKind, DatasetDescriptor, DatasetVersion};
use ienv_core::events::EventKind;
use ienv_core::lineage::{ActivityKind, EntityRef};
use ienv_core::overlay::{Index, Snapshot};
use ienv_core::predicate::{Attrs, Predicate, Scalar};
use ienv_core::{
    canonical, ActivityId, AlgoId, DatasetId, GeoRegion, PolicyId, PrincipalId, ProjectId, Record, RecordId, Schema, Timestamp,
    Value,
};
use serde::{Deserialize, Serialize};

use crate::auth::{self, authorize};
use crate::error::{Error, RecordIssues, Result};
use crate::platform::{Platform, Tx};
use crate::state::State;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Project {
    pub project_id: ProjectId,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub created_by: PrincipalId,
    pub created_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub descriptor: DatasetDescriptor,
    /// `versions[i].version == i + 1`.
    pub versions: Vec<DatasetVersion>,
}

impl DatasetEntry {
    pub fn head(&self) -> &DatasetVersion {
        self.versions.last().expect("every dataset has version 1")
    }
}

/// Input to [`Platform::create_dataset`]; ids and timestamps are assigned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewDataset {
    pub name: String,
    /// Study type code or label.
    pub study_type: String,
    pub schema: Schema,
    pub project_id: ProjectId,
    pub region: GeoRegion,
    #[serde(default)]
    pub key_fields: Vec<String>,
    #[serde(default)]
    pub public: bool,
}

/// A record as submitted; the id is derived when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordInput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<RecordId>,
    pub values: BTreeMap<String, Value>,
}

impl RecordInput {
    pub fn new(values: BTreeMap<String, Value>) -> Self {
        RecordInput { record_id: None, values }
    }

    pub fn with_id(id: impl Into<RecordId>, values: BTreeMap<String, Value>) -> Self {
        RecordInput { record_id: Some(id.into()), values }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VersionSel {
    Head,
    At(u64),
}

impl FromStr for VersionSel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() || s == "head" {
            return Ok(VersionSel::Head);
        }
        s.parse().map(VersionSel::At).map_err(|_| Error::InvalidInput(format!("version `{s}` is not a number or `head`")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetFilter {
    #[serde(default)]
    pub project_id: Option<ProjectId>,
    /// Code or label.
    #[serde(default)]
    pub study_type: Option<String>,
    #[serde(default)]
    pub bbox: Option<GeoRegion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewAlgorithm {
    pub name: String,
    pub version: String,
    pub kind: AlgorithmKind,
    pub param_schema: Schema,
}

pub(crate) fn algorithm_kind_name(kind: AlgorithmKind) -> &'static str {
    match kind {
        AlgorithmKind::Model => "model",
        AlgorithmKind::Analysis => "analysis",
        AlgorithmKind::IngestPlan => "ingest-plan",
    }
}

/// Record values as predicate attributes. Timestamps compare as ISO
/// strings; geo points are not addressable.
pub fn record_attrs(record: &Record) -> Attrs {
    let mut attrs: Attrs = record
        .values
        .iter()
        .filter_map(|(k, v)| {
            let s = match v {
                Value::String(s) => Scalar::Str(s.clone()),
                Value::Integer(i) => Scalar::Num(*i as f64),
                Value::Float(f) => Scalar::Num(*f),
                Value::Boolean(b) => Scalar::Bool(*b),
                Value::Timestamp(t) => Scalar::Str(t.to_iso()),
                Value::GeoPoint(_) => return None,
            };
            Some((k.clone(), s))
        })
        .collect();
    attrs.insert("record_id".into(), Scalar::Str(record.record_id.0.clone()));
    attrs
}

pub(crate) fn filter_records(records: impl IntoIterator<Item = Record>, filter: Option<&Predicate>) -> Vec<Record> {
    let mut out: Vec<Record> = records.into_iter().filter(|r| filter.is_none_or(|p| p.eval(&record_attrs(r)))).collect();
    out.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    out
}

/// Validates values and assigns the record id: supplied, else from the
/// descriptor's key fields, else from every value.
pub(crate) fn build_record(desc: &DatasetDescriptor, input: RecordInput) -> std::result::Result<Record, RecordIssues> {
    let label = input.record_id.clone().unwrap_or_default();
    if let Err(issues) = desc.schema.validate(&input.values) {
        return Err(RecordIssues { record_id: label, issues });
    }
    let id = match input.record_id {
        Some(id) if !id.0.is_empty() => id,
        _ => {
            let keys: Vec<String> =
                if desc.key_fields.is_empty() { input.values.keys().cloned().collect() } else { desc.key_fields.clone() };
            match canonical::key_record_id(&keys, &input.values) {
                Some(id) => id,
                None => {
                    let missing = keys.iter().find(|k| !input.values.contains_key(*k)).cloned().unwrap_or_default();
                    return Err(RecordIssues {
                        record_id: label,
                        issues: vec![ienv_core::schema::FieldIssue {
                            field: missing,
                            problem: ienv_core::schema::Problem::Missing,
                        }],
                    });
                }
            }
        }
    };
    Ok(Record::new(id, input.values))
}

impl State {
    pub fn snapshot(&self, id: &DatasetId, version: u64) -> Result<Snapshot> {
        let v = self.version(id, version)?;
        Ok(self.materialize(&v.record_index))
    }

    pub fn materialize(&self, index: &Index) -> Snapshot {
        index
            .iter()
            .map(|(rid, digest)| {
                let rec = self.records.get(digest).cloned().expect("indexed records are stored");
                (rid.clone(), rec)
            })
            .collect()
    }

    pub fn resolve(&self, id: &DatasetId, sel: VersionSel) -> Result<u64> {
        let entry = self.dataset(id)?;
        match sel {
            VersionSel::Head => Ok(entry.head().version),
            VersionSel::At(v) => self.version(id, v).map(|v| v.version),
        }
    }
}

impl Tx<'_> {
    /// Stores `records`, appends a version over `index` and returns its
    /// number. The caller records the producing activity under `activity`.
    pub fn push_version(
        &mut self,
        dataset: &DatasetId,
        index: Index,
        records: Vec<Record>,
        activity: &ActivityId,
    ) -> Result<u64> {
        let entry = self.st.datasets.get(dataset).ok_or_else(|| Error::UnknownDataset(dataset.to_string()))?;
        let parent = entry.versions.last().map(|v| v.version);
        let version = parent.map_or(1, |p| p + 1);
        for r in records {
            self.st.records.entry(r.digest).or_insert(r);
        }
        let entry = self.st.datasets.get_mut(dataset).expect("checked above");
        entry.versions.push(DatasetVersion {
            dataset_id: dataset.clone(),
            version,
            parent_version: parent,
            record_index: index,
            created_by_activity: activity.clone(),
        });
        Ok(version)
    }

    /// Publishes `data_changed` for `version` of `dataset`.
    pub fn data_changed(&mut self, dataset: &DatasetId, version: u64, actor: &PrincipalId, extra: Attrs) {
        let Ok(entry) = self.st.dataset(dataset) else { return };
        let d = &entry.descriptor;
        let v = &entry.versions[version as usize - 1];
        let mut attrs: Attrs = [
            ("dataset_id", Scalar::Str(d.dataset_id.0.clone())),
            ("dataset_name", Scalar::Str(d.name.clone())),
            ("project_id", Scalar::Str(d.project_id.0.clone())),
            ("study_type", Scalar::Str(d.study_type.label.clone())),
            ("study_type_code", Scalar::Str(d.study_type.code.clone())),
            ("actor", Scalar::Str(actor.0.clone())),
            ("version", Scalar::Num(version as f64)),
            ("record_count", Scalar::Num(v.record_index.len() as f64)),
            ("min_lon", Scalar::Num(d.region.min_lon)),
            ("min_lat", Scalar::Num(d.region.min_lat)),
            ("max_lon", Scalar::Num(d.region.max_lon)),
            ("max_lat", Scalar::Num(d.region.max_lat)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        if let Some(p) = v.parent_version {
            attrs.insert("parent_version".into(), Scalar::Num(p as f64));
        }
        attrs.extend(extra);
        self.publish(EventKind::DataChanged, attrs);
    }

    /// One new version of one dataset produced by one activity whose inputs
    /// are the parent version plus `extra_inputs`.
    #[allow(clippy::too_many_arguments)]
    pub fn commit_version(
        &mut self,
        dataset: &DatasetId,
        index: Index,
        records: Vec<Record>,
        kind: ActivityKind,
        actor: &PrincipalId,
        extra_inputs: Vec<EntityRef>,
        params: Attrs,
        started_at: Timestamp,
        event_extra: Attrs,
    ) -> Result<u64> {
        let head = self.st.dataset(dataset)?.head().version;
        let act = ActivityId::new(self.next_id("act"));
        let version = self.push_version(dataset, index, records, &act)?;
        let mut inputs = vec![EntityRef::dataset_version(&dataset.0, head)];
        inputs.extend(extra_inputs);
        let now = self.now;
        self.record_activity(
            act,
            kind,
            actor,
            inputs,
            vec![EntityRef::dataset_version(&dataset.0, version)],
            params,
            started_at.min(now),
            now,
        )?;
        self.data_changed(dataset, version, actor, event_extra);
        Ok(version)
    }

    /// Inserts a dataset with an empty version 1 made by a create activity.
    pub fn insert_dataset(
        &mut self,
        new: NewDataset,
        actor: &PrincipalId,
        study_types: &[ienv_core::catalog::StudyType],
    ) -> Result<DatasetVersion> {
        if !self.st.projects.contains_key(&new.project_id) {
            return Err(Error::UnknownProject(new.project_id.to_string()));
        }
        authorize(self.st, self.cfg, actor, Action::Write, &Resource::new(ResourceKind::Project, new.project_id.0.clone()))?;
        if new.name.trim().is_empty() {
            return Err(Error::InvalidInput("dataset name must be non-empty".into()));
        }
        new.schema.check().map_err(|e| Error::SchemaInvalid(e.to_string()))?;
        for k in &new.key_fields {
            if new.schema.field(k).is_none() {
                return Err(Error::SchemaInvalid(format!("key field `{k}` is not in the schema")));
            }
        }
        if !new.region.is_valid() {
            return Err(Error::InvalidInput("region needs min <= max on both axes".into()));
        }
        let study_type = find_study_type(study_types, &new.study_type)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("unknown study type `{}`", new.study_type)))?;
        if self.st.datasets.values().any(|d| d.descriptor.project_id == new.project_id && d.descriptor.name == new.name) {
            return Err(Error::DuplicateName(new.name));
        }
        let id = DatasetId::new(self.next_id("ds"));
        self.st.datasets.insert(
            id.clone(),
            DatasetEntry {
                descriptor: DatasetDescriptor {
                    dataset_id: id.clone(),
                    name: new.name,
                    study_type,
                    schema: new.schema,
                    project_id: new.project_id,
                    region: new.region,
                    key_fields: new.key_fields,
                    public: new.public,
                    created_by: actor.clone(),
                    created_at: self.now,
                },
                versions: Vec::new(),
            },
        );
        let act = ActivityId::new(self.next_id("act"));
        self.push_version(&id, Index::new(), vec![], &act)?;
        let now = self.now;
        self.record_activity(
            act,
            ActivityKind::Create,
            actor,
            vec![],
            vec![EntityRef::dataset_version(&id.0, 1)],
            Attrs::new(),
            now,
            now,
        )?;
        self.data_changed(&id, 1, actor, Attrs::new());
        Ok(self.st.version(&id, 1)?.clone())
    }
}

impl Platform {
    /// Any authenticated principal may create a project and becomes its
    /// admin.
    pub fn create_project(&self, name: &str, description: &str, actor: &PrincipalId) -> Result<Project> {
        self.transact(|tx| {
            if !tx.st.principals.contains_key(actor) {
                return Err(Error::Unauthenticated);
            }
            if name.trim().is_empty() {
                return Err(Error::InvalidInput("project name must be non-empty".into()));
            }
            if tx.st.projects.values().any(|p| p.name == name) {
                return Err(Error::DuplicateName(name.into()));
            }
            let id = ProjectId::new(tx.next_id("prj"));
            let project = Project {
                project_id: id.clone(),
                name: name.into(),
                description: description.into(),
                created_by: actor.clone(),
                created_at: tx.now,
            };
            tx.st.projects.insert(id.clone(), project.clone());
            let pid = PolicyId::new(tx.next_id("pol"));
            tx.st.policies.insert(
                pid.clone(),
                Policy {
                    policy_id: pid,
                    principal_id: actor.clone(),
                    role: Role::Admin,
                    resource: Resource::new(ResourceKind::Project, id.0.clone()),
                    effect: Effect::Allow,
                },
            );
            let attrs: Attrs =
                [("project_id".to_string(), Scalar::Str(id.0.clone())), ("actor".to_string(), Scalar::Str(actor.0.clone()))]
                    .into_iter()
                    .collect();
            tx.publish(EventKind::ProjectChanged, attrs);
            Ok(project)
        })
    }

    pub fn list_projects(&self, actor: &PrincipalId) -> Vec<Project> {
        let st = self.read();
        st.projects
            .values()
            .filter(|p| {
                let r = Resource::new(ResourceKind::Project, p.project_id.0.clone());
                auth::check_in(&st, self.config(), actor, Action::Read, &r).allowed
            })
            .cloned()
            .collect()
    }

    pub fn project(&self, id: &ProjectId, actor: &PrincipalId) -> Result<Project> {
        let st = self.read();
        let p = st.projects.get(id).cloned().ok_or_else(|| Error::UnknownProject(id.to_string()))?;
        authorize(&st, self.config(), actor, Action::Read, &Resource::new(ResourceKind::Project, id.0.clone()))?;
        Ok(p)
    }

    pub fn create_dataset(&self, new: NewDataset, actor: &PrincipalId) -> Result<DatasetVersion> {
        let types = self.study_types().to_vec();
        self.transact(|tx| tx.insert_dataset(new, actor, &types))
    }

    pub fn dataset(&self, id: &DatasetId, actor: &PrincipalId) -> Result<(DatasetDescriptor, u64)> {
        let st = self.read();
        let entry = st.dataset(id)?;
        authorize(&st, self.config(), actor, Action::Read, &dataset_resource(id))?;
        Ok((entry.descriptor.clone(), entry.head().version))
    }

    /// Head version number, without an access check.
    pub fn head_version(&self, id: &DatasetId) -> Result<u64> {
        Ok(self.read().dataset(id)?.head().version)
    }

    /// All versions of a dataset, without an access check.
    pub fn versions(&self, id: &DatasetId) -> Result<Vec<DatasetVersion>> {
        Ok(self.read().dataset(id)?.versions.clone())
    }

    /// Upserts records by id on top of `base_version`, which must be the
    /// head.
    pub fn append_records(
        &self,
        dataset: &DatasetId,
        base_version: u64,
        records: Vec<RecordInput>,
        actor: &PrincipalId,
    ) -> Result<DatasetVersion> {
        let _slot = self.lock_writers([dataset]);
        let started = self.now();
        self.transact(|tx| {
            let entry = tx.st.dataset(dataset)?;
            authorize(tx.st, tx.cfg, actor, Action::Write, &dataset_resource(dataset))?;
            let head = entry.head().version;
            if base_version != head {
                return Err(Error::StaleBase { base: base_version, head });
            }
            let desc = &entry.descriptor;
            let mut built = Vec::with_capacity(records.len());
            let mut issues = Vec::new();
            for input in records {
                match build_record(desc, input) {
                    Ok(r) => built.push(r),
                    Err(e) => issues.push(e),
                }
            }
            if !issues.is_empty() {
                return Err(Error::ValidationFailed(issues));
            }
            let mut index = entry.head().record_index.clone();
            for r in &built {
                index.insert(r.record_id.clone(), r.digest);
            }
            let count = built.len();
            let mut params = Attrs::new();
            params.insert("record_count".into(), Scalar::Num(count as f64));
            let v = tx.commit_version(dataset, index, built, ActivityKind::Edit, actor, vec![], params, started, Attrs::new())?;
            Ok(tx.st.version(dataset, v)?.clone())
        })
    }

    /// Records of a snapshot matching `filter`, sorted by record id.
    pub fn read_records(
        &self,
        dataset: &DatasetId,
        version: VersionSel,
        filter: Option<&Predicate>,
        actor: &PrincipalId,
    ) -> Result<Vec<Record>> {
        let st = self.read();
        st.dataset(dataset)?;
        authorize(&st, self.config(), actor, Action::Read, &dataset_resource(dataset))?;
        let v = st.resolve(dataset, version)?;
        Ok(filter_records(st.snapshot(dataset, v)?.into_values(), filter))
    }

    /// Datasets matching every given filter that `actor` may read.
    pub fn list_datasets(&self, filter: &DatasetFilter, actor: &PrincipalId) -> Vec<DatasetDescriptor> {
        let st = self.read();
        let study = filter.study_type.as_deref().map(|s| find_study_type(self.study_types(), s).map(|t| t.code.clone()));
        st.datasets
            .values()
            .map(|e| &e.descriptor)
            .filter(|d| filter.project_id.as_ref().is_none_or(|p| &d.project_id == p))
            .filter(|d| match &study {
                None => true,
                Some(None) => false,
                Some(Some(code)) => &d.study_type.code == code,
            })
            .filter(|d| filter.bbox.as_ref().is_none_or(|b| b.intersects(&d.region)))
            .filter(|d| auth::check_in(&st, self.config(), actor, Action::Read, &dataset_resource(&d.dataset_id)).allowed)
            .cloned()
            .collect()
    }

    pub fn register_algorithm(&self, new: NewAlgorithm, actor: &PrincipalId) -> Result<AlgoId> {
        self.transact(|tx| {
            authorize(tx.st, tx.cfg, actor, Action::Admin, &Resource::platform())?;
            tx.insert_algorithm(new, actor)
        })
    }

    pub fn list_algorithms(&self, kind: Option<AlgorithmKind>) -> Vec<AlgorithmEntry> {
        self.read().algorithms.values().filter(|a| kind.is_none_or(|k| a.kind == k)).cloned().collect()
    }

    pub fn algorithm(&self, id: &AlgoId) -> Result<AlgorithmEntry> {
        self.read().algorithms.get(id).cloned().ok_or_else(|| Error::UnknownAlgorithm(id.to_string()))
    }

    pub fn algorithm_by_name(&self, name: &str, version: Option<&str>) -> Option<AlgorithmEntry> {
        let st = self.read();
        // Latest registration wins when no version is given.
        let matches: Vec<&AlgorithmEntry> =
            st.algorithms.values().filter(|a| a.name == name && version.is_none_or(|v| a.version == v)).collect();
        matches.last().map(|a| (*a).clone())
    }
}

impl Tx<'_> {
    pub fn insert_algorithm(&mut self, new: NewAlgorithm, actor: &PrincipalId) -> Result<AlgoId> {
        if new.name.trim().is_empty() {
            return Err(Error::InvalidInput("algorithm name must be non-empty".into()));
        }
        if !is_semver(&new.version) {
            return Err(Error::InvalidInput(format!("`{}` is not a semantic version", new.version)));
        }
        if !new.param_schema.fields.is_empty() {
            new.param_schema.check().map_err(|e| Error::SchemaInvalid(e.to_string()))?;
        }
        if self.st.algorithms.values().any(|a| a.name == new.name && a.version == new.version) {
            return Err(Error::DuplicateAlgorithm(format!("{}@{}", new.name, new.version)));
        }
        let id = AlgoId::new(self.next_id("algo"));
        let entry = AlgorithmEntry {
            algo_id: id.clone(),
            name: new.name,
            version: new.version,
            kind: new.kind,
            param_schema: new.param_schema,
            registered_at: self.now,
        };
        let attrs: Attrs = [
            ("algo_id", Scalar::Str(id.0.clone())),
            ("algo_name", Scalar::Str(entry.name.clone())),
            ("algo_version", Scalar::Str(entry.version.clone())),
            ("algo_kind", Scalar::Str(algorithm_kind_name(entry.kind).into())),
            ("actor", Scalar::Str(actor.0.clone())),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        self.st.algorithms.insert(id.clone(), entry);
        self.publish(EventKind::AlgorithmChanged, attrs);
        Ok(id)
    }
}

pub(crate) fn dataset_resource(id: &DatasetId) -> Resource {
    Resource::new(ResourceKind::Dataset, id.0.clone())
}
