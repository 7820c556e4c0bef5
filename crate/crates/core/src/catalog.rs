//! Catalog entities: study types, dataset descriptors and versions,
//! registered algorithms.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::canonical::Digest;
use crate::geo::GeoRegion;
use crate::ids::{ActivityId, AlgoId, DatasetId, PrincipalId, ProjectId, RecordId};
use crate::schema::Schema;
use crate::time::Timestamp;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyType {
    pub code: String,
    pub label: String,
}

/// The five named field-study types.
const NAMED_STUDY_TYPES: [(&str, &str); 5] = [
    ("benthics", "Benthics"),
    ("fish", "Fish"),
    ("channel_morphology", "Channel Morphology"),
    ("channel_stability", "Channel Stability"),
    ("discharge", "Discharge"),
];

pub const STUDY_TYPE_COUNT: usize = 17;

/// Seventeen study types: the five named ones, then placeholders
/// `placeholder_06` … `placeholder_17` whose labels say so.
pub fn seed_study_types() -> Vec<StudyType> {
    let mut out: Vec<StudyType> =
        NAMED_STUDY_TYPES.iter().map(|(code, label)| StudyType { code: (*code).into(), label: (*label).into() }).collect();
    for n in NAMED_STUDY_TYPES.len() + 1..=STUDY_TYPE_COUNT {
        out.push(StudyType { code: format!("placeholder_{n:02}"), label: format!("Placeholder study type {n:02}") });
    }
    out
}

/// Finds a study type by code or by label, case-insensitively.
pub fn find_study_type<'a>(types: &'a [StudyType], key: &str) -> Option<&'a StudyType> {
    types.iter().find(|t| t.code.eq_ignore_ascii_case(key) || t.label.eq_ignore_ascii_case(key))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: DatasetId,
    pub name: String,
    pub study_type: StudyType,
    pub schema: Schema,
    pub project_id: ProjectId,
    pub region: GeoRegion,
    /// Fields whose values derive a record id when callers omit one.
    #[serde(default)]
    pub key_fields: Vec<String>,
    /// Readable without a session when the platform enables public reads.
    #[serde(default)]
    pub public: bool,
    pub created_by: PrincipalId,
    pub created_at: Timestamp,
}

/// Immutable snapshot: record id → record digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetVersion {
    pub dataset_id: DatasetId,
    pub version: u64,
    pub parent_version: Option<u64>,
    pub record_index: BTreeMap<RecordId, Digest>,
    pub created_by_activity: ActivityId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmKind {
    Model,
    Analysis,
    IngestPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmEntry {
    pub algo_id: AlgoId,
    pub name: String,
    pub version: String,
    pub kind: AlgorithmKind,
    pub param_schema: Schema,
    pub registered_at: Timestamp,
}

/// True for a semantic version string (`1.0.0`, `2.1.0-rc.1`, …).
pub fn is_semver(text: &str) -> bool {
    semver::Version::parse(text).is_ok()
}
