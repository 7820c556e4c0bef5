//! Copy-on-write working sets over pinned dataset versions.

use std::collections::BTreeMap;

use ienv_core::access::{Action, Resource, ResourceKind};
use ienv_core::lineage::{ActivityKind, EntityKind, EntityRef};
use ienv_core::overlay::{index_of, plan_merge, DatasetChanges, MergePlan, MergeStrategy, Overlay, OverlayOp, Snapshot};
use ienv_core::predicate::{Attrs, Predicate, Scalar};
use ienv_core::{ActivityId, DatasetId, PrincipalId, Record, RecordId, Timestamp, WorkingSetId};
use serde::{Deserialize, Serialize};

use crate::auth::{authorize, check_in};
use crate::catalog::{build_record, dataset_resource, filter_records, RecordInput};
use crate::error::{Error, Result};
use crate::platform::{Platform, Tx};
use crate::state::State;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pin {
    pub dataset_id: DatasetId,
    pub version: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WsState {
    Open,
    Merged,
    Discarded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkingSet {
    pub ws_id: WorkingSetId,
    pub owner: PrincipalId,
    pub base: Vec<Pin>,
    pub overlay: BTreeMap<DatasetId, Overlay>,
    pub state: WsState,
    pub created_at: Timestamp,
}

impl WorkingSet {
    pub fn pin(&self, dataset: &DatasetId) -> Option<u64> {
        self.base.iter().find(|p| &p.dataset_id == dataset).map(|p| p.version)
    }
}

/// Per-dataset net changes of a working set.
pub type ChangeSet = BTreeMap<DatasetId, DatasetChanges>;

/// One overlay edit as submitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum WsOp {
    Upsert {
        #[serde(flatten)]
        record: RecordInput,
    },
    Delete {
        record_id: RecordId,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeResult {
    /// New head version per dataset that changed.
    pub versions: BTreeMap<DatasetId, u64>,
    /// Conflicting records settled by the `ours` or `theirs` strategy.
    pub conflicts_resolved: Vec<(DatasetId, RecordId)>,
    pub activity_id: Option<ActivityId>,
}

pub(crate) fn ws_resource(id: &WorkingSetId) -> Resource {
    Resource::new(ResourceKind::WorkingSet, id.0.clone())
}

fn ws<'a>(st: &'a State, id: &WorkingSetId) -> Result<&'a WorkingSet> {
    st.working_sets.get(id).ok_or_else(|| Error::UnknownWorkingSet(id.to_string()))
}

/// The owner always passes; anyone else needs `action` on the working set.
fn authorize_ws(st: &State, cfg: &crate::config::Config, w: &WorkingSet, actor: &PrincipalId, action: Action) -> Result<()> {
    if &w.owner == actor {
        return Ok(());
    }
    authorize(st, cfg, actor, action, &ws_resource(&w.ws_id))
}

fn ensure_open(w: &WorkingSet) -> Result<()> {
    match w.state {
        WsState::Open => Ok(()),
        _ => Err(Error::WorkingSetClosed(w.ws_id.to_string())),
    }
}

impl State {
    /// Pinned snapshot with the overlay applied.
    pub(crate) fn ws_contents(&self, w: &WorkingSet, dataset: &DatasetId) -> Result<Snapshot> {
        let v = w.pin(dataset).ok_or_else(|| Error::InvalidInput(format!("`{dataset}` is not pinned in {}", w.ws_id)))?;
        let base = self.snapshot(dataset, v)?;
        Ok(match w.overlay.get(dataset) {
            Some(o) => o.apply(&base),
            None => base,
        })
    }

    pub(crate) fn ws_diff(&self, w: &WorkingSet) -> Result<ChangeSet> {
        let mut out = ChangeSet::new();
        for (ds, overlay) in &w.overlay {
            let v = w.pin(ds).expect("overlays exist only for pins");
            let changes = overlay.diff(&self.version(ds, v)?.record_index);
            if !changes.is_empty() {
                out.insert(ds.clone(), changes);
            }
        }
        Ok(out)
    }
}

impl Tx<'_> {
    /// Validates and applies overlay edits without an access check.
    pub(crate) fn ws_apply(&mut self, id: &WorkingSetId, dataset: &DatasetId, ops: Vec<WsOp>) -> Result<()> {
        let w = ws(self.st, id)?;
        ensure_open(w)?;
        if w.pin(dataset).is_none() {
            return Err(Error::InvalidInput(format!("`{dataset}` is not pinned in {id}")));
        }
        let desc = &self.st.dataset(dataset)?.descriptor;
        let mut built = Vec::with_capacity(ops.len());
        let mut issues = Vec::new();
        for op in ops {
            match op {
                WsOp::Upsert { record } => match build_record(desc, record) {
                    Ok(r) => built.push((r.record_id.clone(), OverlayOp::Upsert(r))),
                    Err(e) => issues.push(e),
                },
                WsOp::Delete { record_id } => built.push((record_id, OverlayOp::Delete)),
            }
        }
        if !issues.is_empty() {
            return Err(Error::ValidationFailed(issues));
        }
        let w = self.st.working_sets.get_mut(id).expect("checked above");
        let overlay = w.overlay.entry(dataset.clone()).or_default();
        for (rid, op) in built {
            overlay.write(rid, op);
        }
        Ok(())
    }

    pub(crate) fn ws_add_pin(&mut self, id: &WorkingSetId, pin: Pin) -> Result<()> {
        let w = self.st.working_sets.get_mut(id).ok_or_else(|| Error::UnknownWorkingSet(id.to_string()))?;
        ensure_open(w)?;
        if w.pin(&pin.dataset_id).is_none() {
            w.base.push(pin);
        }
        Ok(())
    }
}

impl Platform {
    /// Opens a working set over explicit version pins.
    pub fn create_working_set(&self, pins: Vec<Pin>, owner: &PrincipalId) -> Result<WorkingSet> {
        self.transact(|tx| {
            if !tx.st.principals.contains_key(owner) {
                return Err(Error::Unauthenticated);
            }
            let mut seen = std::collections::BTreeSet::new();
            for p in &pins {
                if !seen.insert(&p.dataset_id) {
                    return Err(Error::InvalidInput(format!("`{}` pinned twice", p.dataset_id)));
                }
                tx.st.version(&p.dataset_id, p.version)?;
                authorize(tx.st, tx.cfg, owner, Action::Read, &dataset_resource(&p.dataset_id))?;
            }
            let id = WorkingSetId::new(tx.next_id("ws"));
            let w = WorkingSet {
                ws_id: id.clone(),
                owner: owner.clone(),
                base: pins,
                overlay: BTreeMap::new(),
                state: WsState::Open,
                created_at: tx.now,
            };
            tx.st.working_sets.insert(id, w.clone());
            Ok(w)
        })
    }

    pub fn working_set(&self, id: &WorkingSetId, actor: &PrincipalId) -> Result<WorkingSet> {
        let st = self.read();
        let w = ws(&st, id)?;
        authorize_ws(&st, self.config(), w, actor, Action::Read)?;
        Ok(w.clone())
    }

    /// Working sets the actor owns or may read.
    pub fn list_working_sets(&self, actor: &PrincipalId) -> Vec<WorkingSet> {
        let st = self.read();
        st.working_sets
            .values()
            .filter(|w| &w.owner == actor || check_in(&st, self.config(), actor, Action::Read, &ws_resource(&w.ws_id)).allowed)
            .cloned()
            .collect()
    }

    /// Applies overlay edits; the last write per record id wins.
    pub fn ws_write(&self, id: &WorkingSetId, dataset: &DatasetId, ops: Vec<WsOp>, actor: &PrincipalId) -> Result<ChangeSet> {
        self.transact(|tx| {
            let w = ws(tx.st, id)?;
            ensure_open(w)?;
            authorize_ws(tx.st, tx.cfg, w, actor, Action::Write)?;
            tx.ws_apply(id, dataset, ops)?;
            tx.st.ws_diff(ws(tx.st, id)?)
        })
    }

    pub fn ws_read(
        &self,
        id: &WorkingSetId,
        dataset: &DatasetId,
        filter: Option<&Predicate>,
        actor: &PrincipalId,
    ) -> Result<Vec<Record>> {
        let st = self.read();
        let w = ws(&st, id)?;
        if w.state == WsState::Discarded {
            return Err(Error::WorkingSetClosed(id.to_string()));
        }
        authorize_ws(&st, self.config(), w, actor, Action::Read)?;
        Ok(filter_records(st.ws_contents(w, dataset)?.into_values(), filter))
    }

    pub fn diff(&self, id: &WorkingSetId, actor: &PrincipalId) -> Result<ChangeSet> {
        let st = self.read();
        let w = ws(&st, id)?;
        authorize_ws(&st, self.config(), w, actor, Action::Read)?;
        st.ws_diff(w)
    }

    /// Three-way merge of every overlay onto the current heads.
    pub fn merge(&self, id: &WorkingSetId, strategy: MergeStrategy, actor: &PrincipalId) -> Result<MergeResult> {
        let pinned: Vec<DatasetId> = {
            let st = self.read();
            ws(&st, id)?.base.iter().map(|p| p.dataset_id.clone()).collect()
        };
        let _slots = self.lock_writers(&pinned);
        let started = self.now();
        self.transact(|tx| {
            let w = ws(tx.st, id)?.clone();
            ensure_open(&w)?;
            authorize_ws(tx.st, tx.cfg, &w, actor, Action::Write)?;
            let mut plans = Vec::new();
            let mut conflicts = Vec::new();
            for (ds, overlay) in &w.overlay {
                if overlay.is_empty() {
                    continue;
                }
                authorize(tx.st, tx.cfg, actor, Action::Write, &dataset_resource(ds))?;
                let pin = w.pin(ds).expect("overlays exist only for pins");
                let base = &tx.st.version(ds, pin)?.record_index;
                let head_v = tx.st.dataset(ds)?.head().version;
                let head = tx.st.snapshot(ds, head_v)?;
                match plan_merge(base, &head, overlay, strategy) {
                    MergePlan::Conflicts(ids) => conflicts.extend(ids.into_iter().map(|r| (ds.0.clone(), r))),
                    MergePlan::Apply { contents, changed, conflicts_resolved } => {
                        plans.push((ds.clone(), pin, head_v, contents, changed, conflicts_resolved))
                    }
                }
            }
            if !conflicts.is_empty() {
                return Err(Error::MergeConflict(conflicts));
            }
            let act = ActivityId::new(tx.next_id("act"));
            let mut result = MergeResult { versions: BTreeMap::new(), conflicts_resolved: vec![], activity_id: None };
            let mut inputs = vec![EntityRef::other(EntityKind::WorkingSet, &w.ws_id.0)];
            let mut outputs = Vec::new();
            for (ds, pin, head_v, contents, changed, resolved) in plans {
                result.conflicts_resolved.extend(resolved.into_iter().map(|r| (ds.clone(), r)));
                if !changed {
                    continue;
                }
                inputs.push(EntityRef::dataset_version(&ds.0, pin));
                if head_v != pin {
                    inputs.push(EntityRef::dataset_version(&ds.0, head_v));
                }
                let index = index_of(&contents);
                let v = tx.push_version(&ds, index, contents.into_values().collect(), &act)?;
                outputs.push(EntityRef::dataset_version(&ds.0, v));
                result.versions.insert(ds, v);
            }
            if !outputs.is_empty() {
                let mut params = Attrs::new();
                params.insert("strategy".into(), Scalar::Str(strategy_name(strategy).into()));
                let now = tx.now;
                tx.record_activity(act.clone(), ActivityKind::Merge, actor, inputs, outputs, params, started.min(now), now)?;
                result.activity_id = Some(act);
                for (ds, v) in result.versions.clone() {
                    let extra: Attrs = [("working_set_id".to_string(), Scalar::Str(w.ws_id.0.clone()))].into_iter().collect();
                    tx.data_changed(&ds, v, actor, extra);
                }
            }
            tx.st.working_sets.get_mut(id).expect("checked above").state = WsState::Merged;
            Ok(result)
        })
    }

    /// Closes the working set without touching any dataset.
    pub fn discard(&self, id: &WorkingSetId, actor: &PrincipalId) -> Result<()> {
        self.transact(|tx| {
            let w = ws(tx.st, id)?;
            ensure_open(w)?;
            authorize_ws(tx.st, tx.cfg, w, actor, Action::Admin)?;
            let w = tx.st.working_sets.get_mut(id).expect("checked above");
            w.state = WsState::Discarded;
            w.overlay.clear();
            Ok(())
        })
    }
}

fn strategy_name(s: MergeStrategy) -> &'static str {
    match s {
        MergeStrategy::AbortOnConflict => "abort_on_conflict",
        MergeStrategy::Ours => "ours",
        MergeStrategy::Theirs => "theirs",
    }
}
