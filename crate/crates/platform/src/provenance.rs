//! Lineage and cumulative-results queries over the activity log.

use ienv_core::access::Action;
use ienv_core::lineage::{self, Activity, Direction, EntityKind, EntityRef, Lineage};
use ienv_core::{ActivityId, DatasetId, GeoRegion, PrincipalId, Timestamp};
use serde::{Deserialize, Serialize};

use crate::auth::{authorize, check_in};
use crate::catalog::dataset_resource;
use crate::error::{Error, Result};
use crate::platform::Platform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CumulativeResult {
    pub activity: Activity,
    pub output: EntityRef,
}

impl Platform {
    /// Lineage DAG around an existing entity. Dataset entities need `read`.
    pub fn lineage(
        &self,
        root: &EntityRef,
        direction: Direction,
        max_depth: Option<usize>,
        actor: &PrincipalId,
    ) -> Result<Lineage> {
        let st = self.read();
        let exists = match root.kind {
            EntityKind::DatasetVersion => root.version.is_some_and(|v| st.version(&DatasetId::new(root.id.clone()), v).is_ok()),
            EntityKind::Algorithm => st.algorithms.contains_key(&root.id.as_str().into()),
            EntityKind::WorkingSet => st.working_sets.contains_key(&root.id.as_str().into()),
            EntityKind::Job => st.jobs.contains_key(&root.id.as_str().into()),
        };
        if !exists {
            return Err(Error::UnknownEntity(root.key()));
        }
        if root.kind == EntityKind::DatasetVersion {
            authorize(&st, self.config(), actor, Action::Read, &dataset_resource(&DatasetId::new(root.id.clone())))?;
        } else if !st.principals.contains_key(actor) {
            return Err(Error::Unauthenticated);
        }
        let depth = max_depth.unwrap_or(st.activities.len()).min(st.activities.len());
        Ok(lineage::lineage(&st.activities, root, direction, depth))
    }

    /// Job runs with a readable output dataset intersecting `region`,
    /// newest first.
    pub fn cumulative_results(
        &self,
        region: &GeoRegion,
        algo_name: Option<&str>,
        window: (Option<Timestamp>, Option<Timestamp>),
        actor: &PrincipalId,
    ) -> Vec<CumulativeResult> {
        let st = self.read();
        let region_of = |e: &EntityRef| st.datasets.get(&DatasetId::new(e.id.clone())).map(|d| d.descriptor.region);
        lineage::cumulative_results(&st.activities, region_of, region, algo_name, window)
            .into_iter()
            .filter(|(_, out)| {
                check_in(&st, self.config(), actor, Action::Read, &dataset_resource(&DatasetId::new(out.id.clone()))).allowed
            })
            .map(|(a, out)| CumulativeResult { activity: a.clone(), output: out })
            .collect()
    }

    pub fn activity(&self, id: &ActivityId) -> Option<Activity> {
        self.read().activities.iter().find(|a| &a.activity_id == id).cloned()
    }

    /// The full append-only log, oldest first.
    pub fn activities(&self) -> Vec<Activity> {
        self.read().activities.clone()
    }
}
