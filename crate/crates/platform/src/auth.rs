//! Principals, password sessions and policy-based authorization.

use std::collections::BTreeSet;

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::{Algorithm, Argon2, Params, Version};
use ienv_core::access::{self, Action, Decision, Effect, Policy, PrincipalKind, Resource, ResourceKind, Role};
use ienv_core::events::EventKind;
use ienv_core::lineage::ActivityKind;
use ienv_core::predicate::{Attrs, Scalar};
use ienv_core::{PolicyId, PrincipalId, Timestamp};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::platform::Platform;
use crate::state::State;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub principal_id: PrincipalId,
    pub kind: PrincipalKind,
    pub name: String,
    /// Teams this user belongs to. Always empty for teams and services.
    #[serde(default)]
    pub member_of: Vec<PrincipalId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    /// 32 random bytes, hex.
    pub token: String,
    pub principal_id: PrincipalId,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewPrincipal {
    pub name: String,
    pub kind: PrincipalKind,
    #[serde(default)]
    pub secret: Option<String>,
    #[serde(default)]
    pub member_of: Vec<PrincipalId>,
    #[serde(default)]
    pub platform_admin: bool,
}

/// A policy as submitted for grant; the id is assigned on storage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRequest {
    pub principal_id: PrincipalId,
    pub role: Role,
    pub resource: Resource,
    #[serde(default = "allow")]
    pub effect: Effect,
}

fn allow() -> Effect {
    Effect::Allow
}

fn hasher(cfg: &Config) -> Result<Argon2<'static>> {
    let params = Params::new(cfg.auth.kdf_memory_kib, cfg.auth.kdf_iterations, 1, None)
        .map_err(|e| Error::ConfigInvalid(format!("argon2 parameters: {e}")))?;
    Ok(Argon2::new(Algorithm::Argon2id, Version::V0x13, params))
}

pub(crate) fn hash_secret(cfg: &Config, secret: &str) -> Result<String> {
    let salt =
        SaltString::encode_b64(&rand::random::<[u8; 16]>()).map_err(|e| Error::Storage(format!("salt encoding failed: {e}")))?;
    hasher(cfg)?
        .hash_password(secret.as_bytes(), &salt)
        .map(|h| h.to_string())
        .map_err(|e| Error::Storage(format!("hashing failed: {e}")))
}

fn verify_secret(cfg: &Config, phc: &str, secret: &str) -> bool {
    let Ok(parsed) = PasswordHash::new(phc) else {
        return false;
    };
    hasher(cfg).is_ok_and(|h| h.verify_password(secret.as_bytes(), &parsed).is_ok())
}

/// The principal plus every team it belongs to.
pub(crate) fn subjects(st: &State, principal: &PrincipalId) -> Vec<PrincipalId> {
    let mut out = vec![principal.clone()];
    if let Some(p) = st.principals.get(principal) {
        out.extend(p.member_of.iter().cloned());
    }
    out
}

/// Innermost-first scope chain of a concrete resource.
pub(crate) fn chain_for(st: &State, resource: &Resource) -> Vec<Resource> {
    let project = match resource.kind {
        ResourceKind::Dataset => st.datasets.get(&resource.id.as_str().into()).map(|d| d.descriptor.project_id.0.clone()),
        _ => None,
    };
    access::scope_chain(resource, project.as_deref())
}

pub(crate) fn check_in(st: &State, cfg: &Config, principal: &PrincipalId, action: Action, resource: &Resource) -> Decision {
    if action == Action::Read && resource.kind == ResourceKind::Dataset && cfg.auth.allow_public_read {
        if let Some(d) = st.datasets.get(&resource.id.as_str().into()) {
            if d.descriptor.public {
                return Decision::allow("public dataset");
            }
        }
    }
    let policies: Vec<Policy> = st.policies.values().cloned().collect();
    access::evaluate(&policies, &subjects(st, principal), action, &chain_for(st, resource))
}

/// `Ok` on allow; an anonymous caller gets `Unauthenticated` rather than
/// `PermissionDenied`.
pub(crate) fn authorize(st: &State, cfg: &Config, actor: &PrincipalId, action: Action, resource: &Resource) -> Result<()> {
    let d = check_in(st, cfg, actor, action, resource);
    if d.allowed {
        Ok(())
    } else if actor.is_anonymous() || !st.principals.contains_key(actor) {
        Err(Error::Unauthenticated)
    } else {
        Err(Error::denied(format!("{} on {resource}: {}", action.name(), d.reason)))
    }
}

pub(crate) fn resource_exists(st: &State, r: &Resource) -> bool {
    if r.is_wildcard() {
        return true;
    }
    match r.kind {
        ResourceKind::Platform => r.id == access::PLATFORM_ID,
        ResourceKind::Project => st.projects.contains_key(&r.id.as_str().into()),
        ResourceKind::Dataset => st.datasets.contains_key(&r.id.as_str().into()),
        ResourceKind::WorkingSet => st.working_sets.contains_key(&r.id.as_str().into()),
        ResourceKind::Algorithm => st.algorithms.contains_key(&r.id.as_str().into()),
        ResourceKind::Subscription => st.subscriptions.contains_key(&r.id.as_str().into()),
    }
}

impl Platform {
    /// Creates a user, team or service. Users may join existing teams.
    pub fn create_principal(
        &self,
        name: &str,
        kind: PrincipalKind,
        secret: Option<&str>,
        teams: &[PrincipalId],
    ) -> Result<PrincipalId> {
        if name.trim().is_empty() {
            return Err(Error::InvalidInput("principal name must be non-empty".into()));
        }
        if kind != PrincipalKind::User && !teams.is_empty() {
            return Err(Error::InvalidInput("only users can be team members".into()));
        }
        let credential_hash = match (kind, secret) {
            (PrincipalKind::Team, _) | (_, None) => None,
            (_, Some(s)) => Some(hash_secret(&self.inner.config, s)?),
        };
        self.transact(|tx| {
            if tx.st.principals.values().any(|p| p.name == name) {
                return Err(Error::DuplicateName(name.into()));
            }
            for t in teams {
                match tx.st.principals.get(t) {
                    Some(p) if p.kind == PrincipalKind::Team => {}
                    Some(_) => return Err(Error::InvalidInput(format!("`{t}` is not a team"))),
                    None => return Err(Error::UnknownPrincipal(t.to_string())),
                }
            }
            let prefix = match kind {
                PrincipalKind::User => "user",
                PrincipalKind::Team => "team",
                PrincipalKind::Service => "svc",
            };
            let id = PrincipalId::new(tx.next_id(prefix));
            tx.st.principals.insert(
                id.clone(),
                Principal { principal_id: id.clone(), kind, name: name.into(), member_of: teams.to_vec(), credential_hash },
            );
            if kind == PrincipalKind::Team || !teams.is_empty() {
                let attrs: Attrs = [("principal_id".to_string(), Scalar::Str(id.0.clone()))].into_iter().collect();
                tx.publish(EventKind::TeamChanged, attrs);
            }
            Ok(id)
        })
    }

    pub fn principal(&self, id: &PrincipalId) -> Option<Principal> {
        self.read().principals.get(id).cloned()
    }

    pub fn principal_by_name(&self, name: &str) -> Option<Principal> {
        self.read().principals.values().find(|p| p.name == name).cloned()
    }

    /// Installs allow-admin on the platform scope for `id`.
    pub fn make_platform_admin(&self, id: &PrincipalId) -> Result<PolicyId> {
        self.transact(|tx| {
            if !tx.st.principals.contains_key(id) {
                return Err(Error::UnknownPrincipal(id.to_string()));
            }
            let pid = PolicyId::new(tx.next_id("pol"));
            tx.st.policies.insert(
                pid.clone(),
                Policy {
                    policy_id: pid.clone(),
                    principal_id: id.clone(),
                    role: Role::Admin,
                    resource: Resource::platform(),
                    effect: Effect::Allow,
                },
            );
            Ok(pid)
        })
    }

    /// Principal creation on behalf of `actor`, who must be a platform admin.
    pub fn add_principal(&self, new: NewPrincipal, actor: &PrincipalId) -> Result<PrincipalId> {
        {
            let st = self.read();
            authorize(&st, &self.inner.config, actor, Action::Admin, &Resource::platform())?;
        }
        let id = self.create_principal(&new.name, new.kind, new.secret.as_deref(), &new.member_of)?;
        if new.platform_admin {
            self.make_platform_admin(&id)?;
        }
        Ok(id)
    }

    /// Password login. Unknown names and wrong secrets fail identically.
    pub fn authenticate(&self, name: &str, secret: &str) -> Result<Session> {
        let found = self.principal_by_name(name);
        let ok = match found.as_ref().and_then(|p| p.credential_hash.as_deref()) {
            Some(hash) => verify_secret(&self.inner.config, hash, secret),
            None => false,
        };
        let principal = match (ok, found) {
            (true, Some(p)) => p,
            _ => return Err(Error::BadCredentials),
        };
        let token = hex::encode(rand::random::<[u8; 32]>());
        let ttl_ms = i64::from(self.inner.config.auth.session_ttl_hours) * 3_600_000;
        self.transact(|tx| {
            let session = Session {
                token: token.clone(),
                principal_id: principal.principal_id.clone(),
                issued_at: tx.now,
                expires_at: tx.now.plus_millis(ttl_ms),
            };
            tx.st.sessions.retain(|_, s| s.expires_at > tx.now);
            tx.st.sessions.insert(token.clone(), session.clone());
            let act = tx.next_id("act").into();
            let mut params = Attrs::new();
            params.insert("principal_name".into(), Scalar::Str(principal.name.clone()));
            let now = tx.now;
            tx.record_activity(act, ActivityKind::Login, &principal.principal_id, vec![], vec![], params, now, now)?;
            Ok(session)
        })
    }

    /// Resolves a bearer token; expired and unknown tokens authenticate
    /// nothing.
    pub fn session_principal(&self, token: &str) -> Result<PrincipalId> {
        let st = self.read();
        match st.sessions.get(token) {
            Some(s) if s.expires_at > self.now() => Ok(s.principal_id.clone()),
            _ => Err(Error::Unauthenticated),
        }
    }

    pub fn check(&self, principal: &PrincipalId, action: Action, resource: &Resource) -> Decision {
        check_in(&self.read(), &self.inner.config, principal, action, resource)
    }

    pub fn effective_permissions(&self, principal: &PrincipalId, resource: &Resource) -> BTreeSet<Action> {
        let st = self.read();
        Action::ALL.into_iter().filter(|a| check_in(&st, &self.inner.config, principal, *a, resource).allowed).collect()
    }

    /// Stores a policy. The actor needs `grant` on the target resource or an
    /// enclosing scope; wildcard targets need it on the platform.
    pub fn grant(&self, request: PolicyRequest, actor: &PrincipalId) -> Result<PolicyId> {
        self.transact(|tx| {
            let target = if request.resource.is_wildcard() { Resource::platform() } else { request.resource.clone() };
            authorize(tx.st, tx.cfg, actor, Action::Grant, &target)?;
            if !tx.st.principals.contains_key(&request.principal_id) {
                return Err(Error::UnknownPrincipal(request.principal_id.to_string()));
            }
            if !resource_exists(tx.st, &request.resource) {
                return Err(Error::UnknownResource(request.resource.to_string()));
            }
            let pid = PolicyId::new(tx.next_id("pol"));
            tx.st.policies.insert(
                pid.clone(),
                Policy {
                    policy_id: pid.clone(),
                    principal_id: request.principal_id.clone(),
                    role: request.role,
                    resource: request.resource.clone(),
                    effect: request.effect,
                },
            );
            let mut attrs: Attrs = [
                ("policy_id".to_string(), Scalar::Str(pid.0.clone())),
                ("principal_id".to_string(), Scalar::Str(request.principal_id.0.clone())),
                ("resource_kind".to_string(), Scalar::Str(request.resource.kind.name().into())),
                ("resource_id".to_string(), Scalar::Str(request.resource.id.clone())),
                ("actor".to_string(), Scalar::Str(actor.0.clone())),
            ]
            .into_iter()
            .collect();
            let grantee_is_team = tx.st.principals.get(&request.principal_id).is_some_and(|p| p.kind == PrincipalKind::Team);
            if request.resource.kind == ResourceKind::Project {
                attrs.insert("project_id".into(), Scalar::Str(request.resource.id.clone()));
                tx.publish(EventKind::ProjectChanged, attrs.clone());
            }
            if grantee_is_team {
                tx.publish(EventKind::TeamChanged, attrs);
            }
            Ok(pid)
        })
    }

    pub fn policies(&self) -> Vec<Policy> {
        self.read().policies.values().cloned().collect()
    }
}
