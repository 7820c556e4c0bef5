//! The shared platform handle, its transaction helper and writer slots.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, RwLock, RwLockReadGuard};

use parking_lot::{ArcMutexGuard, RawMutex};

use ienv_core::catalog::{seed_study_types, StudyType};
use ienv_core::events::{Event, EventKind};
use ienv_core::lineage::{Activity, ActivityKind, EntityKind, EntityRef, InvalidActivity};
use ienv_core::predicate::{Attrs, Scalar};
use ienv_core::{ActivityId, DatasetId, PrincipalId, Timestamp};

use crate::clock::{Clock, SystemClock};
use crate::compute::Scheduler;
use crate::config::Config;
use crate::error::Result;
use crate::notify::{self, WebhookTask};
use crate::state::State;

/// Cheap-to-clone handle over the whole platform.
#[derive(Clone)]
pub struct Platform {
    pub(crate) inner: Arc<Inner>,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform").field("storage", &self.inner.store_path).finish_non_exhaustive()
    }
}

pub(crate) struct Inner {
    pub state: RwLock<State>,
    pub config: Config,
    pub clock: Arc<dyn Clock>,
    pub store_path: Option<PathBuf>,
    pub study_types: Vec<StudyType>,
    writers: Mutex<HashMap<DatasetId, Arc<parking_lot::Mutex<()>>>>,
    pub scheduler: Mutex<Scheduler>,
    pub algorithms: RwLock<HashMap<(String, String), Arc<dyn crate::compute::Algorithm>>>,
    /// Bumped and notified whenever a job changes state.
    pub job_changes: (Mutex<u64>, Condvar),
    pub webhooks: Mutex<Option<std::sync::mpsc::Sender<WebhookTask>>>,
}

impl Platform {
    pub fn new(config: Config) -> Result<Self> {
        Platform::with_clock(config, Arc::new(SystemClock))
    }

    pub fn with_clock(config: Config, clock: Arc<dyn Clock>) -> Result<Self> {
        config.validate()?;
        let store_path = config.storage.path.clone();
        let state = match &store_path {
            Some(p) => State::load(p)?.unwrap_or_default(),
            None => State::default(),
        };
        let platform = Platform {
            inner: Arc::new(Inner {
                state: RwLock::new(state),
                clock,
                store_path,
                study_types: seed_study_types(),
                writers: Mutex::new(HashMap::new()),
                scheduler: Mutex::new(Scheduler::default()),
                algorithms: RwLock::new(HashMap::new()),
                job_changes: (Mutex::new(0), Condvar::new()),
                webhooks: Mutex::new(None),
                config,
            }),
        };
        platform.bootstrap()?;
        Ok(platform)
    }

    /// Config backends, the bootstrap admin and built-in algorithms.
    fn bootstrap(&self) -> Result<()> {
        let cfg = self.inner.config.clone();
        self.transact(|tx| {
            for b in &cfg.compute.backends {
                tx.st.backends.entry(b.name.clone()).or_insert_with(|| b.clone());
            }
            Ok(())
        })?;
        self.sync_backends();
        if let Some(admin) = &cfg.auth.bootstrap_admin {
            if self.principal_by_name(&admin.name).is_none() {
                let id = self.create_principal(&admin.name, ienv_core::access::PrincipalKind::User, Some(&admin.secret), &[])?;
                self.make_platform_admin(&id)?;
            }
        }
        crate::models::install_builtin(self)?;
        Ok(())
    }

    pub fn config(&self) -> &Config {
        &self.inner.config
    }

    pub fn now(&self) -> Timestamp {
        self.inner.clock.now()
    }

    pub fn study_types(&self) -> &[StudyType] {
        &self.inner.study_types
    }

    pub(crate) fn read(&self) -> RwLockReadGuard<'_, State> {
        self.inner.state.read().unwrap_or_else(|e| e.into_inner())
    }

    /// Runs `f` under the state write lock. `f` validates before it mutates,
    /// so an `Err` leaves the state untouched. Events published inside the
    /// transaction are matched before the lock is released; webhook pushes
    /// start after.
    pub(crate) fn transact<R>(&self, f: impl FnOnce(&mut Tx<'_>) -> Result<R>) -> Result<R> {
        let mut guard = self.inner.state.write().unwrap_or_else(|e| e.into_inner());
        let now = self.inner.clock.now();
        let mut tx = Tx { st: &mut guard, now, cfg: &self.inner.config, webhooks: Vec::new() };
        let out = f(&mut tx)?;
        let webhooks = std::mem::take(&mut tx.webhooks);
        if let Some(path) = &self.inner.store_path {
            if let Err(e) = guard.save(path) {
                log::error!("state not persisted: {e}");
            }
        }
        drop(guard);
        for task in webhooks {
            notify::dispatch_webhook(self, task);
        }
        Ok(out)
    }

    /// The single-writer slot of a dataset.
    fn writer_slot(&self, id: &DatasetId) -> Arc<parking_lot::Mutex<()>> {
        let mut map = self.inner.writers.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(id.clone()).or_default().clone()
    }

    /// Total activity count; never decreases.
    pub fn activity_count(&self) -> usize {
        self.read().activities.len()
    }
}

/// Held writer slots for several datasets.
pub(crate) struct WriterGuards {
    _guards: Vec<ArcMutexGuard<RawMutex, ()>>,
}

impl Platform {
    /// Takes the slots in dataset-id order so concurrent multi-dataset
    /// writers cannot deadlock.
    pub(crate) fn lock_writers<'a>(&self, ids: impl IntoIterator<Item = &'a DatasetId>) -> WriterGuards {
        let mut ids: Vec<&DatasetId> = ids.into_iter().collect();
        ids.sort();
        ids.dedup();
        let guards = ids.into_iter().map(|id| self.writer_slot(id).lock_arc()).collect();
        WriterGuards { _guards: guards }
    }
}

pub(crate) struct Tx<'a> {
    pub st: &'a mut State,
    pub now: Timestamp,
    pub cfg: &'a Config,
    pub webhooks: Vec<WebhookTask>,
}

impl Tx<'_> {
    pub fn next_id(&mut self, prefix: &str) -> String {
        self.st.next_id(prefix)
    }

    /// Appends a validated activity under a pre-allocated id and publishes
    /// `provenance_changed`.
    #[allow(clippy::too_many_arguments)]
    pub fn record_activity(
        &mut self,
        activity_id: ActivityId,
        kind: ActivityKind,
        agent: &PrincipalId,
        inputs: Vec<EntityRef>,
        outputs: Vec<EntityRef>,
        params: Attrs,
        started_at: Timestamp,
        ended_at: Timestamp,
    ) -> Result<ActivityId> {
        let activity = Activity {
            activity_id: activity_id.clone(),
            kind,
            agent: agent.clone(),
            inputs,
            outputs,
            params,
            started_at,
            ended_at,
            duration_ms: ended_at.millis() - started_at.millis(),
        };
        self.insert_activity(activity)?;
        Ok(activity_id)
    }

    pub fn insert_activity(&mut self, activity: Activity) -> Result<()> {
        activity.validate()?;
        for e in activity.inputs.iter().chain(&activity.outputs) {
            if !self.entity_exists(e) {
                return Err(InvalidActivity::UnknownEntity(e.key()).into());
            }
        }
        let mut attrs: Attrs = [
            ("activity_id".into(), Scalar::Str(activity.activity_id.0.clone())),
            ("activity_kind".into(), Scalar::Str(activity_kind_name(activity.kind).into())),
            ("actor".into(), Scalar::Str(activity.agent.0.clone())),
            ("duration_ms".into(), Scalar::Num(activity.duration_ms as f64)),
        ]
        .into_iter()
        .collect();
        if let Some(ds) = activity.outputs.iter().find(|o| o.kind == EntityKind::DatasetVersion) {
            if let Some(entry) = self.st.datasets.get(&DatasetId::new(ds.id.clone())) {
                attrs.insert("dataset_id".into(), Scalar::Str(ds.id.clone()));
                attrs.insert("project_id".into(), Scalar::Str(entry.descriptor.project_id.0.clone()));
            }
        }
        self.st.activities.push(activity);
        self.publish(EventKind::ProvenanceChanged, attrs);
        Ok(())
    }

    pub fn entity_exists(&self, e: &EntityRef) -> bool {
        match e.kind {
            EntityKind::DatasetVersion => e.version.is_some_and(|v| self.st.version(&DatasetId::new(e.id.clone()), v).is_ok()),
            EntityKind::Algorithm => self.st.algorithms.contains_key(&e.id.as_str().into()),
            EntityKind::WorkingSet => self.st.working_sets.contains_key(&e.id.as_str().into()),
            EntityKind::Job => self.st.jobs.contains_key(&e.id.as_str().into()),
        }
    }

    /// Appends an event, and records one delivery per matching subscription.
    pub fn publish(&mut self, kind: EventKind, attrs: Attrs) -> notify::PublishOutcome {
        let event = Event { event_id: self.st.events.len() as u64 + 1, kind, attrs, occurred_at: self.now };
        notify::deliver(self, event)
    }
}

pub(crate) fn activity_kind_name(kind: ActivityKind) -> &'static str {
    match kind {
        ActivityKind::Create => "create",
        ActivityKind::Edit => "edit",
        ActivityKind::Import => "import",
        ActivityKind::Merge => "merge",
        ActivityKind::JobRun => "job_run",
        ActivityKind::Login => "login",
    }
}
