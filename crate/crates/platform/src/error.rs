//! Platform error type and its stable API codes.

use ienv_core::lineage::InvalidActivity;
use ienv_core::predicate::{ParseError, TypeError};
use ienv_core::schema::FieldIssue;
use ienv_core::watershed::ModelError;
use ienv_core::RecordId;
use serde::Serialize;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Schema problems of one submitted record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RecordIssues {
    pub record_id: RecordId,
    pub issues: Vec<FieldIssue>,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("authentication required")]
    Unauthenticated,
    #[error("unknown principal or wrong secret")]
    BadCredentials,

    #[error("unknown project `{0}`")]
    UnknownProject(String),
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("dataset `{dataset}` has no version {version}")]
    NoSuchVersion { dataset: String, version: String },
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("unknown principal `{0}`")]
    UnknownPrincipal(String),
    #[error("unknown resource `{0}`")]
    UnknownResource(String),
    #[error("unknown source `{0}`")]
    UnknownSource(String),
    #[error("unknown plan `{0}`")]
    UnknownPlan(String),
    #[error("unknown working set `{0}`")]
    UnknownWorkingSet(String),
    #[error("unknown job `{0}`")]
    UnknownJob(String),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown subscription `{0}`")]
    UnknownSubscription(String),

    #[error("name `{0}` already used in this project")]
    DuplicateName(String),
    #[error("algorithm {0} already registered")]
    DuplicateAlgorithm(String),
    #[error("backend `{0}` already registered")]
    DuplicateBackend(String),
    #[error("base version {base} is stale; head is {head}")]
    StaleBase { base: u64, head: u64 },
    #[error("working set `{0}` is closed")]
    WorkingSetClosed(String),
    #[error("merge has {} conflicting records", .0.len())]
    MergeConflict(Vec<(String, RecordId)>),
    #[error("job `{0}` already finished")]
    JobAlreadyFinished(String),

    #[error("invalid schema: {0}")]
    SchemaInvalid(String),
    #[error("{} records failed validation", .0.len())]
    ValidationFailed(Vec<RecordIssues>),
    #[error("job parameters failed validation")]
    ParamValidationFailed(Vec<FieldIssue>),
    #[error("required field `{0}` is not mapped")]
    UnmappedRequiredField(String),
    #[error("invalid source: {0}")]
    InvalidSource(String),
    #[error(transparent)]
    Predicate(#[from] ParseError),
    #[error(transparent)]
    PredicateType(#[from] TypeError),
    #[error("invalid activity: {0}")]
    InvalidActivity(#[from] InvalidActivity),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("fetch of `{uri}` failed: {detail}")]
    FetchFailed { uri: String, detail: String },
    #[error("parse failed at row {row}: {detail}")]
    ParseFailed { row: usize, detail: String },
    #[error("storage error: {0}")]
    Storage(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("cannot bind {addr}: {detail}")]
    BindFailed { addr: String, detail: String },
}

/// Coarse families the HTTP layer maps onto status codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorFamily {
    Forbidden,
    Unauthenticated,
    NotFound,
    Validation,
    Conflict,
    Internal,
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::PermissionDenied(_) => "permission_denied",
            Error::Unauthenticated => "unauthenticated",
            Error::BadCredentials => "bad_credentials",
            Error::UnknownProject(_) => "unknown_project",
            Error::UnknownDataset(_) => "unknown_dataset",
            Error::NoSuchVersion { .. } => "no_such_version",
            Error::UnknownAlgorithm(_) => "unknown_algorithm",
            Error::UnknownPrincipal(_) => "unknown_principal",
            Error::UnknownResource(_) => "unknown_resource",
            Error::UnknownSource(_) => "unknown_source",
            Error::UnknownPlan(_) => "unknown_plan",
            Error::UnknownWorkingSet(_) => "unknown_working_set",
            Error::UnknownJob(_) => "unknown_job",
            Error::UnknownBackend(_) => "unknown_backend",
            Error::UnknownEntity(_) => "unknown_entity",
            Error::UnknownSubscription(_) => "unknown_subscription",
            Error::DuplicateName(_) => "duplicate_name",
            Error::DuplicateAlgorithm(_) => "duplicate_algorithm",
            Error::DuplicateBackend(_) => "duplicate_backend",
            Error::StaleBase { .. } => "stale_base",
            Error::WorkingSetClosed(_) => "working_set_closed",
            Error::MergeConflict(_) => "merge_conflict",
            Error::JobAlreadyFinished(_) => "job_already_finished",
            Error::SchemaInvalid(_) => "schema_invalid",
            Error::ValidationFailed(_) => "validation_failed",
            Error::ParamValidationFailed(_) => "param_validation_failed",
            Error::UnmappedRequiredField(_) => "unmapped_required_field",
            Error::InvalidSource(_) => "invalid_source",
            Error::Predicate(_) => "parse_error",
            Error::PredicateType(_) => "predicate_type_error",
            Error::InvalidActivity(_) => "invalid_activity",
            Error::Model(ModelError::UnknownLandUse(_)) => "unknown_land_use",
            Error::Model(ModelError::SeriesMismatch(_)) => "series_mismatch",
            Error::Model(ModelError::EmptySeries) => "empty_series",
            Error::Model(_) => "invalid_model_input",
            Error::InvalidInput(_) => "invalid_input",
            Error::FetchFailed { .. } => "fetch_failed",
            Error::ParseFailed { .. } => "parse_failed",
            Error::Storage(_) => "storage_error",
            Error::ConfigInvalid(_) => "config_invalid",
            Error::BindFailed { .. } => "bind_failed",
        }
    }

    pub fn family(&self) -> ErrorFamily {
        use Error::*;
        match self {
            PermissionDenied(_) => ErrorFamily::Forbidden,
            Unauthenticated | BadCredentials => ErrorFamily::Unauthenticated,
            UnknownProject(_)
            | UnknownDataset(_)
            | NoSuchVersion { .. }
            | UnknownAlgorithm(_)
            | UnknownPrincipal(_)
            | UnknownResource(_)
            | UnknownSource(_)
            | UnknownPlan(_)
            | UnknownWorkingSet(_)
            | UnknownJob(_)
            | UnknownBackend(_)
            | UnknownEntity(_)
            | UnknownSubscription(_) => ErrorFamily::NotFound,
            DuplicateName(_)
            | DuplicateAlgorithm(_)
            | DuplicateBackend(_)
            | StaleBase { .. }
            | WorkingSetClosed(_)
            | MergeConflict(_)
            | JobAlreadyFinished(_) => ErrorFamily::Conflict,
            SchemaInvalid(_)
            | ValidationFailed(_)
            | ParamValidationFailed(_)
            | UnmappedRequiredField(_)
            | InvalidSource(_)
            | Predicate(_)
            | PredicateType(_)
            | InvalidActivity(_)
            | InvalidInput(_)
            | ParseFailed { .. } => ErrorFamily::Validation,
            Model(ModelError::UnknownLandUse(_)) => ErrorFamily::NotFound,
            Model(_) => ErrorFamily::Validation,
            FetchFailed { .. } | Storage(_) | ConfigInvalid(_) | BindFailed { .. } => ErrorFamily::Internal,
        }
    }

    /// Structured detail for API envelopes.
    pub fn detail(&self) -> serde_json::Value {
        use serde_json::json;
        match self {
            Error::ValidationFailed(items) => json!({ "records": items }),
            Error::ParamValidationFailed(issues) => json!({ "issues": issues }),
            Error::MergeConflict(conflicts) => json!({
                "conflicts": conflicts
                    .iter()
                    .map(|(ds, r)| json!({ "dataset_id": ds, "record_id": r }))
                    .collect::<Vec<_>>()
            }),
            Error::Predicate(p) => json!({ "position": p.position, "expected": p.expected }),
            Error::StaleBase { base, head } => json!({ "base": base, "head": head }),
            Error::ParseFailed { row, .. } => json!({ "row": row }),
            Error::UnmappedRequiredField(f) => json!({ "field": f }),
            _ => serde_json::Value::Null,
        }
    }

    pub(crate) fn denied(reason: impl Into<String>) -> Self {
        Error::PermissionDenied(reason.into())
    }
}
