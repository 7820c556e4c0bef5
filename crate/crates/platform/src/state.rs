//! The single in-process store all modules share, and its on-disk image.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ienv_core::access::Policy;
use ienv_core::catalog::{AlgorithmEntry, DatasetVersion};
use ienv_core::events::Event;
use ienv_core::jobs::{Backend, JobState};
use ienv_core::lineage::Activity;
use ienv_core::{
    AlgoId, DatasetId, Digest, JobId, PlanId, PolicyId, PrincipalId, ProjectId, Record, SourceId, SubId, WorkingSetId,
};
use serde::{Deserialize, Serialize};

use crate::auth::{Principal, Session};
use crate::catalog::{DatasetEntry, Project};
use crate::compute::JobRecord;
use crate::error::{Error, Result};
use crate::ingest::{IngestPlan, SourceDescriptor};
use crate::notify::{Delivery, Subscription};
use crate::workingset::WorkingSet;

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub(crate) struct State {
    pub counters: BTreeMap<String, u64>,
    pub principals: BTreeMap<PrincipalId, Principal>,
    pub policies: BTreeMap<PolicyId, Policy>,
    pub sessions: BTreeMap<String, Session>,
    pub projects: BTreeMap<ProjectId, Project>,
    pub datasets: BTreeMap<DatasetId, DatasetEntry>,
    /// Content-addressed record store shared by every version index.
    pub records: BTreeMap<Digest, Record>,
    pub algorithms: BTreeMap<AlgoId, AlgorithmEntry>,
    pub sources: BTreeMap<SourceId, SourceDescriptor>,
    pub plans: BTreeMap<PlanId, IngestPlan>,
    pub working_sets: BTreeMap<WorkingSetId, WorkingSet>,
    pub activities: Vec<Activity>,
    pub events: Vec<Event>,
    pub subscriptions: BTreeMap<SubId, Subscription>,
    pub deliveries: Vec<Delivery>,
    pub backends: BTreeMap<String, Backend>,
    pub jobs: BTreeMap<JobId, JobRecord>,
}

impl State {
    /// `prefix-000001`, `prefix-000002`, …; zero padding keeps id order
    /// equal to creation order.
    pub fn next_id(&mut self, prefix: &str) -> String {
        let n = self.counters.entry(prefix.into()).or_insert(0);
        *n += 1;
        format!("{prefix}-{n:06}")
    }

    pub fn dataset(&self, id: &DatasetId) -> Result<&DatasetEntry> {
        self.datasets.get(id).ok_or_else(|| Error::UnknownDataset(id.to_string()))
    }

    pub fn version(&self, id: &DatasetId, version: u64) -> Result<&DatasetVersion> {
        let entry = self.dataset(id)?;
        version
            .checked_sub(1)
            .and_then(|i| entry.versions.get(i as usize))
            .ok_or_else(|| Error::NoSuchVersion { dataset: id.to_string(), version: version.to_string() })
    }

    pub fn load(path: &Path) -> Result<Option<State>> {
        match fs::read(path) {
            Ok(bytes) => {
                let mut st: State =
                    serde_json::from_slice(&bytes).map_err(|e| Error::Storage(format!("{}: {e}", path.display())))?;
                st.recover_interrupted_jobs();
                Ok(Some(st))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::Storage(format!("{}: {e}", path.display()))),
        }
    }

    /// Atomic replace: write a sibling temp file, fsync, rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).map_err(|e| Error::Storage(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::Storage(format!("{}: {e}", path.display())))
    }

    /// Jobs cannot resume across restarts: queued ones are cancelled and
    /// running ones failed on load.
    fn recover_interrupted_jobs(&mut self) {
        for job in self.jobs.values_mut() {
            let next = match job.state {
                JobState::Queued => JobState::Cancelled,
                JobState::Running => JobState::Failed,
                _ => continue,
            };
            job.state = next;
            job.error = Some("interrupted by restart".into());
            job.ended_at = job.started_at.or(Some(job.queued_at));
        }
    }
}
