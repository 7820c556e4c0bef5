//! Job submission, placement, execution and result commits.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ienv_core::access::{Action, Effect, Policy, Resource, ResourceKind, Role};
use ienv_core::catalog::{AlgorithmEntry, DatasetDescriptor, DatasetVersion};
use ienv_core::jobs::{select_backend, Backend, BackendKind, BackendLoad, JobState, ReadyQueue};
use ienv_core::lineage::{ActivityKind, EntityKind, EntityRef};
use ienv_core::overlay::Index;
use ienv_core::predicate::{Attrs, Scalar};
use ienv_core::{
    ActivityId, AlgoId, DatasetId, GeoRegion, JobId, PolicyId, PrincipalId, Record, Schema, Timestamp, Value, WorkingSetId,
};
use serde::{Deserialize, Serialize};

use crate::auth::authorize;
use crate::catalog::{build_record, dataset_resource, DatasetEntry, RecordInput};
use crate::error::{Error, Result};
use crate::platform::{Platform, Tx};
use crate::state::State;
use crate::workingset::{Pin, WsOp, WsState};

/// A job input: a pinned dataset version (head when absent at submit) or
/// every pinned dataset of a working set with its overlay applied.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum JobInput {
    Dataset {
        dataset_id: DatasetId,
        #[serde(default)]
        version: Option<u64>,
    },
    WorkingSet {
        working_set_id: WorkingSetId,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub algo_id: AlgoId,
    pub inputs: Vec<JobInput>,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    #[serde(default)]
    pub backend_hint: Option<String>,
    #[serde(default)]
    pub priority: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: JobId,
    pub spec: JobSpec,
    pub submitted_by: PrincipalId,
    pub state: JobState,
    pub backend: String,
    pub queued_at: Timestamp,
    #[serde(default)]
    pub started_at: Option<Timestamp>,
    #[serde(default)]
    pub ended_at: Option<Timestamp>,
    #[serde(default)]
    pub outputs: Vec<EntityRef>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub cancel_requested: bool,
    /// Algorithm-defined result summary.
    #[serde(default)]
    pub summary: Option<serde_json::Value>,
}

/// One materialized input dataset.
#[derive(Clone, Debug)]
pub struct InputData {
    pub descriptor: DatasetDescriptor,
    /// `None` when read through a working-set overlay.
    pub version: Option<u64>,
    pub records: Vec<Record>,
}

pub struct JobContext {
    pub job_id: JobId,
    pub params: BTreeMap<String, Value>,
    pub inputs: Vec<InputData>,
    cancel: Arc<AtomicBool>,
}

impl JobContext {
    pub fn new(job_id: JobId, params: BTreeMap<String, Value>, inputs: Vec<InputData>) -> Self {
        JobContext { job_id, params, inputs, cancel: Arc::default() }
    }

    /// Long-running bodies should poll this and return early.
    pub fn is_cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }
}

/// A result dataset produced by a job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobOutput {
    pub name: String,
    pub schema: Schema,
    #[serde(default)]
    pub key_fields: Vec<String>,
    /// Defaults to the first input's region.
    #[serde(default)]
    pub region: Option<GeoRegion>,
    pub records: Vec<RecordInput>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub outputs: Vec<JobOutput>,
    pub summary: Option<serde_json::Value>,
}

/// An executable algorithm body. Runs in-process against immutable inputs.
pub trait Algorithm: Send + Sync {
    fn run(&self, ctx: &JobContext) -> std::result::Result<JobResult, String>;
}

impl<F> Algorithm for F
where
    F: Fn(&JobContext) -> std::result::Result<JobResult, String> + Send + Sync,
{
    fn run(&self, ctx: &JobContext) -> std::result::Result<JobResult, String> {
        self(ctx)
    }
}

/// Executor instrumentation for one backend.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendStats {
    pub running: u32,
    pub max_running: u32,
    /// Job ids in the order their bodies started.
    pub started: Vec<JobId>,
}

#[derive(Default)]
pub(crate) struct Scheduler {
    backends: BTreeMap<String, Backend>,
    queues: HashMap<String, ReadyQueue>,
    /// Jobs bound to a backend and not yet finished, queued or running.
    assigned: HashMap<String, u32>,
    /// Slots taken by dispatched jobs.
    busy: HashMap<String, u32>,
    stats: HashMap<String, BackendStats>,
    cancel_flags: HashMap<JobId, Arc<AtomicBool>>,
    seq: u64,
}

impl Scheduler {
    fn loads(&self) -> Vec<BackendLoad<'_>> {
        self.backends
            .values()
            .map(|b| BackendLoad { name: &b.name, capacity: b.capacity, assigned: *self.assigned.get(&b.name).unwrap_or(&0) })
            .collect()
    }
}

fn log_state(now: Timestamp, job: &JobId, state: JobState) {
    let level = if state == JobState::Failed { log::Level::Warn } else { log::Level::Info };
    log::log!(target: "ienv::job", level, "{} {} {}", now.to_iso(), job, state.name());
}

impl Platform {
    fn scheduler(&self) -> std::sync::MutexGuard<'_, Scheduler> {
        self.inner.scheduler.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Copies stored backends into the scheduler.
    pub(crate) fn sync_backends(&self) {
        let backends: Vec<Backend> = self.read().backends.values().cloned().collect();
        let mut s = self.scheduler();
        for b in backends {
            s.backends.insert(b.name.clone(), b);
        }
    }

    /// Binds an executable body to a registered `(name, version)`.
    pub fn register_implementation(&self, name: &str, version: &str, body: Arc<dyn Algorithm>) {
        self.inner.algorithms.write().unwrap_or_else(|e| e.into_inner()).insert((name.into(), version.into()), body);
    }

    fn implementation(&self, entry: &AlgorithmEntry) -> Option<Arc<dyn Algorithm>> {
        let map = self.inner.algorithms.read().unwrap_or_else(|e| e.into_inner());
        map.get(&(entry.name.clone(), entry.version.clone())).cloned()
    }

    pub fn register_backend(&self, backend: Backend, actor: &PrincipalId) -> Result<()> {
        if backend.capacity == 0 {
            return Err(Error::InvalidInput(format!("backend `{}` needs capacity >= 1", backend.name)));
        }
        if backend.name.trim().is_empty() {
            return Err(Error::InvalidInput("backend name must be non-empty".into()));
        }
        let mut sched = self.scheduler();
        self.transact(|tx| {
            authorize(tx.st, tx.cfg, actor, Action::Admin, &Resource::platform())?;
            if tx.st.backends.contains_key(&backend.name) {
                return Err(Error::DuplicateBackend(backend.name.clone()));
            }
            tx.st.backends.insert(backend.name.clone(), backend.clone());
            Ok(())
        })?;
        sched.backends.insert(backend.name.clone(), backend);
        Ok(())
    }

    pub fn backends(&self) -> Vec<Backend> {
        self.read().backends.values().cloned().collect()
    }

    pub fn backend_stats(&self, name: &str) -> BackendStats {
        self.scheduler().stats.get(name).cloned().unwrap_or_default()
    }

    /// Validates and queues a job, then starts whatever fits.
    pub fn submit(&self, spec: JobSpec, actor: &PrincipalId) -> Result<JobId> {
        let mut sched = self.scheduler();
        let entry = self.algorithm(&spec.algo_id)?;
        if self.implementation(&entry).is_none() {
            return Err(Error::InvalidInput(format!("algorithm {}@{} has no executable body", entry.name, entry.version)));
        }
        let backend = {
            let loads = sched.loads();
            if let Some(h) = &spec.backend_hint {
                if !loads.iter().any(|l| l.name == h) {
                    return Err(Error::UnknownBackend(h.clone()));
                }
            }
            select_backend(&loads, spec.backend_hint.as_deref())
                .map(str::to_owned)
                .ok_or_else(|| Error::UnknownBackend("no backend registered".into()))?
        };
        let seq = sched.seq + 1;
        let job_id = self.transact(|tx| {
            authorize(tx.st, tx.cfg, actor, Action::Execute, &Resource::new(ResourceKind::Algorithm, entry.algo_id.0.clone()))?;
            if !entry.param_schema.fields.is_empty() {
                entry.param_schema.validate(&spec.params).map_err(Error::ParamValidationFailed)?;
            }
            if spec.inputs.is_empty() {
                return Err(Error::InvalidInput("a job needs at least one input".into()));
            }
            let mut spec = spec.clone();
            let mut ws_count = 0;
            for input in &mut spec.inputs {
                match input {
                    JobInput::Dataset { dataset_id, version } => {
                        let head = tx.st.dataset(dataset_id)?.head().version;
                        let v = *version.get_or_insert(head);
                        tx.st.version(dataset_id, v)?;
                        authorize(tx.st, tx.cfg, actor, Action::Read, &dataset_resource(dataset_id))?;
                    }
                    JobInput::WorkingSet { working_set_id } => {
                        ws_count += 1;
                        let w = tx
                            .st
                            .working_sets
                            .get(working_set_id)
                            .ok_or_else(|| Error::UnknownWorkingSet(working_set_id.to_string()))?;
                        if w.state != WsState::Open {
                            return Err(Error::WorkingSetClosed(working_set_id.to_string()));
                        }
                        if &w.owner != actor {
                            let r = Resource::new(ResourceKind::WorkingSet, working_set_id.0.clone());
                            authorize(tx.st, tx.cfg, actor, Action::Write, &r)?;
                        }
                    }
                }
            }
            if ws_count > 1 {
                return Err(Error::InvalidInput("a job reads at most one working set".into()));
            }
            let id = JobId::new(tx.next_id("job"));
            tx.st.jobs.insert(
                id.clone(),
                JobRecord {
                    job_id: id.clone(),
                    spec,
                    submitted_by: actor.clone(),
                    state: JobState::Queued,
                    backend: backend.clone(),
                    queued_at: tx.now,
                    started_at: None,
                    ended_at: None,
                    outputs: vec![],
                    error: None,
                    cancel_requested: false,
                    summary: None,
                },
            );
            log_state(tx.now, &id, JobState::Queued);
            Ok(id)
        })?;
        sched.seq = seq;
        sched.queues.entry(backend.clone()).or_default().push(spec.priority, seq, job_id.clone());
        *sched.assigned.entry(backend).or_default() += 1;
        self.pump(&mut sched);
        self.notify_jobs();
        Ok(job_id)
    }

    /// Dispatches queued jobs onto free slots.
    fn pump(&self, sched: &mut Scheduler) {
        let names: Vec<String> = sched.backends.keys().cloned().collect();
        for name in names {
            let capacity = sched.backends[&name].capacity;
            let kind = sched.backends[&name].kind;
            loop {
                let busy = *sched.busy.get(&name).unwrap_or(&0);
                if busy >= capacity {
                    break;
                }
                let Some(job) = sched.queues.get_mut(&name).and_then(ReadyQueue::pop) else { break };
                *sched.busy.entry(name.clone()).or_default() += 1;
                let flag = Arc::new(AtomicBool::new(false));
                sched.cancel_flags.insert(job.clone(), flag.clone());
                let platform = self.clone();
                let backend = name.clone();
                std::thread::Builder::new()
                    .name(format!("ienv-{job}"))
                    .spawn(move || platform.execute(job, backend, kind, flag))
                    .expect("spawn job executor");
            }
        }
    }

    fn notify_jobs(&self) {
        let (lock, cv) = &self.inner.job_changes;
        *lock.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        cv.notify_all();
    }

    fn execute(&self, job: JobId, backend: String, kind: BackendKind, flag: Arc<AtomicBool>) {
        self.run_job(&job, &backend, kind, flag);
        let mut sched = self.scheduler();
        sched.cancel_flags.remove(&job);
        if let Some(b) = sched.busy.get_mut(&backend) {
            *b = b.saturating_sub(1);
        }
        if let Some(a) = sched.assigned.get_mut(&backend) {
            *a = a.saturating_sub(1);
        }
        self.pump(&mut sched);
        drop(sched);
        self.notify_jobs();
    }

    fn run_job(&self, job: &JobId, backend: &str, kind: BackendKind, flag: Arc<AtomicBool>) {
        let started = self.transact(|tx| {
            let rec = tx.st.jobs.get_mut(job).ok_or_else(|| Error::UnknownJob(job.to_string()))?;
            if rec.state != JobState::Queued || rec.cancel_requested {
                return Ok(None);
            }
            rec.state = JobState::Running;
            rec.started_at = Some(tx.now);
            log_state(tx.now, job, JobState::Running);
            Ok(Some(rec.clone()))
        });
        let rec = match started {
            Ok(Some(rec)) => rec,
            Ok(None) => return,
            Err(e) => {
                log::error!("job {job} could not start: {e}");
                return;
            }
        };
        if let BackendKind::ExternalStub { latency_ms } = kind {
            let until = Instant::now() + Duration::from_millis(latency_ms);
            while Instant::now() < until && !flag.load(Ordering::SeqCst) {
                std::thread::sleep(Duration::from_millis(latency_ms.clamp(1, 5)));
            }
        }
        let outcome = self.materialize_inputs(&rec).and_then(|inputs| {
            let entry = self.algorithm(&rec.spec.algo_id)?;
            let body = self.implementation(&entry).ok_or_else(|| Error::UnknownAlgorithm(entry.algo_id.to_string()))?;
            let ctx = JobContext { job_id: job.clone(), params: rec.spec.params.clone(), inputs, cancel: flag.clone() };
            {
                let mut sched = self.scheduler();
                let s = sched.stats.entry(backend.to_owned()).or_default();
                s.running += 1;
                s.max_running = s.max_running.max(s.running);
                s.started.push(job.clone());
            }
            let result = if flag.load(Ordering::SeqCst) { Err("cancelled".to_owned()) } else { body.run(&ctx) };
            {
                let mut sched = self.scheduler();
                let s = sched.stats.entry(backend.to_owned()).or_default();
                s.running = s.running.saturating_sub(1);
            }
            Ok((entry, ctx.inputs, result))
        });
        let committed = self.transact(|tx| {
            let cancelled = tx.st.jobs.get(job).is_some_and(|r| r.cancel_requested);
            let (state, error, outputs, summary) = if cancelled {
                (JobState::Cancelled, None, vec![], None)
            } else {
                match &outcome {
                    Err(e) => (JobState::Failed, Some(e.to_string()), vec![], None),
                    Ok((_, _, Err(msg))) => (JobState::Failed, Some(msg.clone()), vec![], None),
                    Ok((entry, inputs, Ok(result))) => match tx.commit_job(&rec, entry, inputs, result) {
                        Ok(outs) => (JobState::Succeeded, None, outs, result.summary.clone()),
                        Err(e) => (JobState::Failed, Some(e.to_string()), vec![], None),
                    },
                }
            };
            let rec = tx.st.jobs.get_mut(job).expect("job exists");
            rec.state = state;
            rec.error = error;
            rec.outputs = outputs;
            rec.summary = summary;
            rec.ended_at = Some(tx.now);
            log_state(tx.now, job, state);
            Ok(())
        });
        if let Err(e) = committed {
            log::error!("job {job} result not recorded: {e}");
        }
    }

    fn materialize_inputs(&self, rec: &JobRecord) -> Result<Vec<InputData>> {
        let st = self.read();
        let mut out = Vec::new();
        for input in &rec.spec.inputs {
            match input {
                JobInput::Dataset { dataset_id, version } => {
                    let v = version.expect("resolved at submit");
                    let descriptor = st.dataset(dataset_id)?.descriptor.clone();
                    let records = st.snapshot(dataset_id, v)?.into_values().collect();
                    out.push(InputData { descriptor, version: Some(v), records });
                }
                JobInput::WorkingSet { working_set_id } => {
                    let w = st
                        .working_sets
                        .get(working_set_id)
                        .ok_or_else(|| Error::UnknownWorkingSet(working_set_id.to_string()))?;
                    if w.state != WsState::Open {
                        return Err(Error::WorkingSetClosed(working_set_id.to_string()));
                    }
                    for pin in &w.base {
                        let descriptor = st.dataset(&pin.dataset_id)?.descriptor.clone();
                        let records = st.ws_contents(w, &pin.dataset_id)?.into_values().collect();
                        out.push(InputData { descriptor, version: None, records });
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn status(&self, job: &JobId, actor: &PrincipalId) -> Result<JobRecord> {
        let st = self.read();
        let rec = st.jobs.get(job).cloned().ok_or_else(|| Error::UnknownJob(job.to_string()))?;
        if &rec.submitted_by != actor {
            let r = Resource::new(ResourceKind::Algorithm, rec.spec.algo_id.0.clone());
            authorize(&st, self.config(), actor, Action::Admin, &r)?;
        }
        Ok(rec)
    }

    /// Jobs submitted by `actor`, or every job for a platform admin.
    pub fn list_jobs(&self, actor: &PrincipalId) -> Vec<JobRecord> {
        let st = self.read();
        let admin = crate::auth::check_in(&st, self.config(), actor, Action::Admin, &Resource::platform()).allowed;
        st.jobs.values().filter(|j| admin || &j.submitted_by == actor).cloned().collect()
    }

    /// Queued jobs never start; running jobs are signalled and end
    /// cancelled without outputs.
    pub fn cancel(&self, job: &JobId, actor: &PrincipalId) -> Result<JobRecord> {
        let mut sched = self.scheduler();
        let rec = self.transact(|tx| {
            let rec = tx.st.jobs.get(job).ok_or_else(|| Error::UnknownJob(job.to_string()))?;
            if &rec.submitted_by != actor {
                authorize(tx.st, tx.cfg, actor, Action::Admin, &Resource::platform())?;
            }
            if rec.state.is_terminal() {
                return Err(Error::JobAlreadyFinished(job.to_string()));
            }
            let rec = tx.st.jobs.get_mut(job).expect("checked above");
            rec.cancel_requested = true;
            if rec.state == JobState::Queued {
                rec.state = JobState::Cancelled;
                rec.ended_at = Some(tx.now);
                log_state(tx.now, job, JobState::Cancelled);
            }
            Ok(rec.clone())
        })?;
        if rec.state == JobState::Cancelled {
            if let Some(q) = sched.queues.get_mut(&rec.backend) {
                if q.remove(job) {
                    if let Some(a) = sched.assigned.get_mut(&rec.backend) {
                        *a = a.saturating_sub(1);
                    }
                }
            }
        }
        if let Some(flag) = sched.cancel_flags.get(job) {
            flag.store(true, Ordering::SeqCst);
        }
        drop(sched);
        self.notify_jobs();
        Ok(rec)
    }

    /// Blocks until the job is terminal or `timeout` passes.
    pub fn wait_job(&self, job: &JobId, timeout: Duration) -> Result<JobRecord> {
        let deadline = Instant::now() + timeout;
        let (lock, cv) = &self.inner.job_changes;
        let mut gen = lock.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            let rec = self.read().jobs.get(job).cloned().ok_or_else(|| Error::UnknownJob(job.to_string()))?;
            if rec.state.is_terminal() {
                return Ok(rec);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(rec);
            }
            gen = cv.wait_timeout(gen, deadline - now).unwrap_or_else(|e| e.into_inner()).0;
        }
    }
}

impl Tx<'_> {
    /// Writes a successful job's outputs and its job_run activity.
    fn commit_job(
        &mut self,
        rec: &JobRecord,
        entry: &AlgorithmEntry,
        inputs: &[InputData],
        result: &JobResult,
    ) -> Result<Vec<EntityRef>> {
        let ws = rec.spec.inputs.iter().find_map(|i| match i {
            JobInput::WorkingSet { working_set_id } => Some(working_set_id.clone()),
            JobInput::Dataset { .. } => None,
        });
        let first = inputs.first().ok_or_else(|| Error::InvalidInput("job has no inputs".into()))?;
        let project = first.descriptor.project_id.clone();
        let mut act_inputs = vec![EntityRef::other(EntityKind::Algorithm, &entry.algo_id.0)];
        for input in &rec.spec.inputs {
            match input {
                JobInput::Dataset { dataset_id, version } => {
                    act_inputs.push(EntityRef::dataset_version(&dataset_id.0, version.expect("resolved at submit")));
                }
                JobInput::WorkingSet { working_set_id } => {
                    let w = self
                        .st
                        .working_sets
                        .get(working_set_id)
                        .ok_or_else(|| Error::UnknownWorkingSet(working_set_id.to_string()))?;
                    if w.state != WsState::Open {
                        return Err(Error::WorkingSetClosed(working_set_id.to_string()));
                    }
                    for p in &w.base {
                        act_inputs.push(EntityRef::dataset_version(&p.dataset_id.0, p.version));
                    }
                }
            }
        }
        // Validate every output before the first mutation.
        let mut staged = Vec::with_capacity(result.outputs.len());
        let mut names = std::collections::BTreeSet::new();
        for out in &result.outputs {
            let name = format!("{}-{}", out.name, rec.job_id);
            out.schema.check().map_err(|e| Error::SchemaInvalid(e.to_string()))?;
            let taken = self.st.datasets.values().any(|d| d.descriptor.project_id == project && d.descriptor.name == name);
            if taken || !names.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            let region = out.region.unwrap_or(first.descriptor.region);
            let mut desc = first.descriptor.clone();
            desc.schema = out.schema.clone();
            desc.key_fields = out.key_fields.clone();
            let mut built = Vec::with_capacity(out.records.len());
            for r in out.records.clone() {
                built.push(build_record(&desc, r).map_err(|e| Error::ValidationFailed(vec![e]))?);
            }
            staged.push((name, out, region, built));
        }
        let act = ActivityId::new(self.next_id("act"));
        let mut outputs = Vec::new();
        let mut created = Vec::new();
        for (name, out, region, built) in staged {
            let id = self.insert_result_dataset(&name, out, region, &project, first, &rec.submitted_by);
            match &ws {
                None => {
                    let index: Index = built.iter().map(|r| (r.record_id.clone(), r.digest)).collect();
                    let v = self.push_version(&id, index, built, &act)?;
                    outputs.push(EntityRef::dataset_version(&id.0, v));
                    created.push((id, v));
                }
                Some(ws_id) => {
                    let c = ActivityId::new(self.next_id("act"));
                    self.push_version(&id, Index::new(), vec![], &c)?;
                    let now = self.now;
                    self.record_activity(
                        c,
                        ActivityKind::Create,
                        &rec.submitted_by,
                        vec![],
                        vec![EntityRef::dataset_version(&id.0, 1)],
                        Attrs::new(),
                        now,
                        now,
                    )?;
                    self.data_changed(&id, 1, &rec.submitted_by, Attrs::new());
                    self.ws_add_pin(ws_id, Pin { dataset_id: id.clone(), version: 1 })?;
                    let ops = built
                        .into_iter()
                        .map(|r| WsOp::Upsert { record: RecordInput { record_id: Some(r.record_id), values: r.values } })
                        .collect();
                    self.ws_apply(ws_id, &id, ops)?;
                }
            }
        }
        if let Some(ws_id) = &ws {
            outputs.push(EntityRef::other(EntityKind::WorkingSet, &ws_id.0));
        }
        outputs.push(EntityRef::other(EntityKind::Job, &rec.job_id.0));
        let mut params: Attrs = rec
            .spec
            .params
            .iter()
            .filter_map(|(k, v)| {
                let s = match v {
                    Value::String(s) => Scalar::Str(s.clone()),
                    Value::Boolean(b) => Scalar::Bool(*b),
                    other => Scalar::Num(other.as_f64()?),
                };
                Some((k.clone(), s))
            })
            .collect();
        params.insert("algo_id".into(), Scalar::Str(entry.algo_id.0.clone()));
        params.insert("algo_name".into(), Scalar::Str(entry.name.clone()));
        params.insert("algo_version".into(), Scalar::Str(entry.version.clone()));
        params.insert("job_id".into(), Scalar::Str(rec.job_id.0.clone()));
        params.insert("backend".into(), Scalar::Str(rec.backend.clone()));
        let started = rec.started_at.unwrap_or(self.now);
        let now = self.now;
        self.record_activity(act, ActivityKind::JobRun, &rec.submitted_by, act_inputs, outputs.clone(), params, started, now)?;
        for (id, v) in created {
            let extra: Attrs = [
                ("job_id".to_string(), Scalar::Str(rec.job_id.0.clone())),
                ("algo_name".to_string(), Scalar::Str(entry.name.clone())),
            ]
            .into_iter()
            .collect();
            self.data_changed(&id, v, &rec.submitted_by, extra);
        }
        Ok(outputs)
    }

    /// A dataset with no versions yet, readable by the submitter.
    fn insert_result_dataset(
        &mut self,
        name: &str,
        out: &JobOutput,
        region: GeoRegion,
        project: &ienv_core::ProjectId,
        first: &InputData,
        owner: &PrincipalId,
    ) -> DatasetId {
        let id = DatasetId::new(self.next_id("ds"));
        self.st.datasets.insert(
            id.clone(),
            DatasetEntry {
                descriptor: DatasetDescriptor {
                    dataset_id: id.clone(),
                    name: name.into(),
                    study_type: first.descriptor.study_type.clone(),
                    schema: out.schema.clone(),
                    project_id: project.clone(),
                    region,
                    key_fields: out.key_fields.clone(),
                    public: false,
                    created_by: owner.clone(),
                    created_at: self.now,
                },
                versions: Vec::<DatasetVersion>::new(),
            },
        );
        let pid = PolicyId::new(self.next_id("pol"));
        self.st.policies.insert(
            pid.clone(),
            Policy {
                policy_id: pid,
                principal_id: owner.clone(),
                role: Role::Admin,
                resource: dataset_resource(&id),
                effect: Effect::Allow,
            },
        );
        id
    }
}

impl State {
    pub(crate) fn jobs_by_state(&self, project: Option<&ienv_core::ProjectId>) -> BTreeMap<&'static str, usize> {
        let mut out: BTreeMap<&'static str, usize> = JobState::ALL.iter().map(|s| (s.name(), 0)).collect();
        for j in self.jobs.values() {
            let in_project = project.is_none_or(|p| {
                j.spec.inputs.iter().any(|i| match i {
                    JobInput::Dataset { dataset_id, .. } => {
                        self.datasets.get(dataset_id).is_some_and(|d| &d.descriptor.project_id == p)
                    }
                    JobInput::WorkingSet { working_set_id } => self.working_sets.get(working_set_id).is_some_and(|w| {
                        w.base.iter().any(|pin| self.datasets.get(&pin.dataset_id).is_some_and(|d| &d.descriptor.project_id == p))
                    }),
                })
            });
            if in_project {
                *out.entry(j.state.name()).or_default() += 1;
            }
        }
        out
    }
}
