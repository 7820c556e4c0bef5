//! Job lifecycle and placement rules.

use alloc::collections::BTreeMap;
use alloc::string::String;
use core::cmp::Reverse;

use serde::{Deserialize, Serialize};

use crate::ids::JobId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobState {
    pub const ALL: [JobState; 5] =
        [JobState::Queued, JobState::Running, JobState::Succeeded, JobState::Failed, JobState::Cancelled];

    pub fn name(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Running => "running",
            JobState::Succeeded => "succeeded",
            JobState::Failed => "failed",
            JobState::Cancelled => "cancelled",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed | JobState::Cancelled)
    }

    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Running) | (Queued, Cancelled) | (Running, Succeeded) | (Running, Failed) | (Running, Cancelled)
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum BackendKind {
    #[default]
    Local,
    /// Accepts jobs like a remote cluster would, adding a fixed latency
    /// before the job body runs locally.
    ExternalStub { latency_ms: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Backend {
    pub name: String,
    pub capacity: u32,
    #[serde(default)]
    pub kind: BackendKind,
}

/// Placement view of a backend: how many jobs are already bound to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackendLoad<'a> {
    pub name: &'a str,
    pub capacity: u32,
    pub assigned: u32,
}

impl BackendLoad<'_> {
    pub fn free_slots(&self) -> i64 {
        i64::from(self.capacity) - i64::from(self.assigned)
    }
}

/// The hinted backend if it exists, else the one with the most free slots,
/// ties broken by name.
pub fn select_backend<'a>(loads: &[BackendLoad<'a>], hint: Option<&str>) -> Option<&'a str> {
    if let Some(h) = hint {
        return loads.iter().find(|b| b.name == h).map(|b| b.name);
    }
    loads.iter().min_by(|a, b| b.free_slots().cmp(&a.free_slots()).then_with(|| a.name.cmp(b.name))).map(|b| b.name)
}

/// Per-backend queue: higher priority first, FIFO within a priority.
#[derive(Clone, Debug, Default)]
pub struct ReadyQueue {
    entries: BTreeMap<(Reverse<u32>, u64), JobId>,
}

impl ReadyQueue {
    pub fn push(&mut self, priority: u32, seq: u64, job: JobId) {
        self.entries.insert((Reverse(priority), seq), job);
    }

    pub fn pop(&mut self) -> Option<JobId> {
        self.entries.pop_first().map(|(_, j)| j)
    }

    pub fn remove(&mut self, job: &JobId) -> bool {
        let key = self.entries.iter().find(|(_, j)| *j == job).map(|(k, _)| *k);
        key.and_then(|k| self.entries.remove(&k)).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legal_transitions_only() {
        use JobState::*;
        let legal = [(Queued, Running), (Queued, Cancelled), (Running, Succeeded), (Running, Failed), (Running, Cancelled)];
        for a in JobState::ALL {
            for b in JobState::ALL {
                assert_eq!(a.can_become(b), legal.contains(&(a, b)), "{a:?}->{b:?}");
            }
        }
    }

    #[test]
    fn most_free_slots_then_name() {
        let loads = [BackendLoad { name: "b", capacity: 1, assigned: 0 }, BackendLoad { name: "a", capacity: 2, assigned: 0 }];
        assert_eq!(select_backend(&loads, None), Some("a"));
        let tied = [BackendLoad { name: "z", capacity: 3, assigned: 1 }, BackendLoad { name: "y", capacity: 2, assigned: 0 }];
        assert_eq!(select_backend(&tied, None), Some("y"));
        assert_eq!(select_backend(&tied, Some("z")), Some("z"));
        assert_eq!(select_backend(&tied, Some("nope")), None);
        assert_eq!(select_backend(&[], None), None);
    }

    #[test]
    fn queue_orders_by_priority_then_submission() {
        let mut q = ReadyQueue::default();
        q.push(0, 1, "j1".into());
        q.push(5, 2, "j2".into());
        q.push(0, 3, "j3".into());
        q.push(5, 4, "j4".into());
        assert!(q.remove(&"j3".into()));
        let order: alloc::vec::Vec<_> = core::iter::from_fn(|| q.pop()).collect();
        assert_eq!(order, [JobId::new("j2"), JobId::new("j4"), JobId::new("j1")]);
    }
}
