//! Role-based, default-deny access evaluation with scope inheritance.
//!
//! A request names a principal, an action and a resource. The caller expands
//! the resource into its scope chain (dataset → project → platform) and the
//! principal into itself plus its teams. A policy matches when its principal
//! is one of those subjects, its resource pattern matches any scope in the
//! chain, and its role covers the action. Any matching deny wins; otherwise
//! any matching allow wins; otherwise the answer is deny.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::{PolicyId, PrincipalId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Read,
    Write,
    Execute,
    Admin,
    Grant,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Read, Action::Write, Action::Execute, Action::Admin, Action::Grant];

    pub fn name(self) -> &'static str {
        match self {
            Action::Read => "read",
            Action::Write => "write",
            Action::Execute => "execute",
            Action::Admin => "admin",
            Action::Grant => "grant",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Reader,
    Writer,
    Admin,
    Executor,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Reader, Role::Writer, Role::Admin, Role::Executor];

    /// admin ⊇ writer ⊇ reader; executor is disjoint and grants only execute.
    pub fn actions(self) -> &'static [Action] {
        match self {
            Role::Reader => &[Action::Read],
            Role::Writer => &[Action::Read, Action::Write],
            Role::Admin => &Action::ALL,
            Role::Executor => &[Action::Execute],
        }
    }

    pub fn covers(self, action: Action) -> bool {
        self.actions().contains(&action)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    Allow,
    Deny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Platform,
    Project,
    Dataset,
    WorkingSet,
    Algorithm,
    Subscription,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 6] = [
        ResourceKind::Platform,
        ResourceKind::Project,
        ResourceKind::Dataset,
        ResourceKind::WorkingSet,
        ResourceKind::Algorithm,
        ResourceKind::Subscription,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResourceKind::Platform => "platform",
            ResourceKind::Project => "project",
            ResourceKind::Dataset => "dataset",
            ResourceKind::WorkingSet => "working_set",
            ResourceKind::Algorithm => "algorithm",
            ResourceKind::Subscription => "subscription",
        }
    }

    pub fn parse(text: &str) -> Option<ResourceKind> {
        ResourceKind::ALL.into_iter().find(|k| k.name() == text)
    }
}

pub const WILDCARD: &str = "*";
pub const PLATFORM_ID: &str = "platform";

/// A concrete resource, or with `id == "*"` a pattern over a kind.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Resource {
    pub kind: ResourceKind,
    pub id: String,
}

impl Resource {
    pub fn new(kind: ResourceKind, id: impl Into<String>) -> Self {
        Resource { kind, id: id.into() }
    }

    pub fn platform() -> Self {
        Resource::new(ResourceKind::Platform, PLATFORM_ID)
    }

    pub fn is_wildcard(&self) -> bool {
        self.id == WILDCARD
    }

    /// Pattern match: same kind, and equal id or wildcard.
    pub fn matches(&self, concrete: &Resource) -> bool {
        self.kind == concrete.kind && (self.is_wildcard() || self.id == concrete.id)
    }
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub policy_id: PolicyId,
    pub principal_id: PrincipalId,
    pub role: Role,
    pub resource: Resource,
    pub effect: Effect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrincipalKind {
    User,
    Team,
    Service,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub allowed: bool,
    pub reason: String,
}

impl Decision {
    pub fn allow(reason: impl Into<String>) -> Self {
        Decision { allowed: true, reason: reason.into() }
    }

    pub fn deny(reason: impl Into<String>) -> Self {
        Decision { allowed: false, reason: reason.into() }
    }
}

/// Evaluates `action` for `subjects` (a principal and its teams) against a
/// resource expanded into its `scope_chain`, innermost first.
pub fn evaluate(policies: &[Policy], subjects: &[PrincipalId], action: Action, scope_chain: &[Resource]) -> Decision {
    let mut allow: Option<&Policy> = None;
    let mut deny: Option<&Policy> = None;
    for p in policies {
        if !subjects.contains(&p.principal_id) || !p.role.covers(action) {
            continue;
        }
        if !scope_chain.iter().any(|scope| p.resource.matches(scope)) {
            continue;
        }
        let slot = match p.effect {
            Effect::Allow => &mut allow,
            Effect::Deny => &mut deny,
        };
        // Lowest policy id is reported, so reasons are deterministic.
        if slot.is_none_or(|cur| p.policy_id < cur.policy_id) {
            *slot = Some(p);
        }
    }
    if let Some(p) = deny {
        return Decision::deny(format!("denied by policy {}", p.policy_id));
    }
    if let Some(p) = allow {
        return Decision::allow(format!("allowed by policy {}", p.policy_id));
    }
    Decision::deny("default deny")
}

/// `{ a | evaluate(.., a, ..).allowed }`.
pub fn effective_actions(policies: &[Policy], subjects: &[PrincipalId], scope_chain: &[Resource]) -> BTreeSet<Action> {
    Action::ALL.into_iter().filter(|a| evaluate(policies, subjects, *a, scope_chain).allowed).collect()
}

/// Scope chain for a resource inside an optional enclosing project.
/// Every chain ends at the platform.
pub fn scope_chain(resource: &Resource, project: Option<&str>) -> Vec<Resource> {
    let mut chain = alloc::vec![resource.clone()];
    if resource.kind != ResourceKind::Project {
        if let Some(p) = project {
            chain.push(Resource::new(ResourceKind::Project, p));
        }
    }
    if resource.kind != ResourceKind::Platform {
        chain.push(Resource::platform());
    }
    chain
}
