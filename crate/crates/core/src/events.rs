//! Platform events and the attribute vocabulary subscriptions are
//! type-checked against.

use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::predicate::{Attrs, Scalar, ScalarType};
use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    DataChanged,
    ProvenanceChanged,
    ModelChanged,
    AlgorithmChanged,
    ProjectChanged,
    TeamChanged,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::DataChanged => "data_changed",
            EventKind::ProvenanceChanged => "provenance_changed",
            EventKind::ModelChanged => "model_changed",
            EventKind::AlgorithmChanged => "algorithm_changed",
            EventKind::ProjectChanged => "project_changed",
            EventKind::TeamChanged => "team_changed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: u64,
    pub kind: EventKind,
    pub attrs: Attrs,
    pub occurred_at: Timestamp,
}

impl Event {
    /// Attributes as seen by predicates: the payload plus `kind`.
    pub fn match_attrs(&self) -> Attrs {
        let mut a = self.attrs.clone();
        a.insert("kind".into(), Scalar::Str(self.kind.name().into()));
        a
    }

    pub fn attr_str(&self, key: &str) -> Option<&str> {
        match self.attrs.get(key) {
            Some(Scalar::Str(s)) => Some(s),
            _ => None,
        }
    }
}

/// Known payload attributes and their types.
pub fn attribute_type(name: &str) -> Option<ScalarType> {
    Some(match name {
        "kind" | "dataset_id" | "project_id" | "actor" | "study_type" | "study_type_code" | "dataset_name" | "activity_id"
        | "activity_kind" | "algo_id" | "algo_name" | "algo_version" | "algo_kind" | "job_id" | "job_state"
        | "working_set_id" | "policy_id" | "principal_id" | "resource_kind" | "resource_id" | "role" | "effect" | "source_id" => {
            ScalarType::Str
        }
        "version" | "parent_version" | "record_count" | "min_lon" | "min_lat" | "max_lon" | "max_lat" | "inserted"
        | "updated" | "duration_ms" => ScalarType::Num,
        _ => return None,
    })
}

/// Lower snake case: `[a-z][a-z0-9_]*`.
pub fn is_snake_case(key: &str) -> bool {
    let mut chars = key.chars();
    matches!(chars.next(), Some('a'..='z')) && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'))
}

pub fn attrs_are_snake_case(attrs: &Attrs) -> bool {
    attrs.keys().all(|k| is_snake_case(k))
}

pub fn str_attr(key: &str, value: impl Into<String>) -> (String, Scalar) {
    (key.into(), Scalar::Str(value.into()))
}

pub fn num_attr(key: &str, value: f64) -> (String, Scalar) {
    (key.into(), Scalar::Num(value))
}
