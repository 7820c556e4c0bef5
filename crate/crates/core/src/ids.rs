//! Opaque identifiers.

use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($($(#[$meta:meta])* $name:ident),* $(,)?) => {$(
        $(#[$meta])*
        #[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                $name(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.into())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    )*};
}

string_id! {
    DatasetId,
    ProjectId,
    /// A user, team, or service account.
    PrincipalId,
    RecordId,
    ActivityId,
    AlgoId,
    WorkingSetId,
    JobId,
    PolicyId,
    SourceId,
    PlanId,
    SubId,
}

impl PrincipalId {
    /// The unauthenticated caller. Never matches a stored principal.
    pub fn anonymous() -> Self {
        PrincipalId("anonymous".into())
    }

    /// Internal agent used for built-in registrations.
    pub fn system() -> Self {
        PrincipalId("system".into())
    }

    pub fn is_anonymous(&self) -> bool {
        self.0 == "anonymous"
    }
}
