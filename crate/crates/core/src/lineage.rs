//! Provenance activities and lineage traversal.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::geo::GeoRegion;
use crate::ids::{ActivityId, PrincipalId};
use crate::predicate::Scalar;
use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityKind {
    Create,
    Edit,
    Import,
    Merge,
    JobRun,
    Login,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    DatasetVersion,
    Algorithm,
    WorkingSet,
    Job,
}

impl EntityKind {
    pub fn name(self) -> &'static str {
        match self {
            EntityKind::DatasetVersion => "dataset_version",
            EntityKind::Algorithm => "algorithm",
            EntityKind::WorkingSet => "working_set",
            EntityKind::Job => "job",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "dataset_version" => EntityKind::DatasetVersion,
            "algorithm" => EntityKind::Algorithm,
            "working_set" => EntityKind::WorkingSet,
            "job" => EntityKind::Job,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityRef {
    pub kind: EntityKind,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
}

impl EntityRef {
    pub fn dataset_version(dataset_id: &str, version: u64) -> Self {
        EntityRef { kind: EntityKind::DatasetVersion, id: dataset_id.into(), version: Some(version) }
    }

    pub fn other(kind: EntityKind, id: &str) -> Self {
        EntityRef { kind, id: id.into(), version: None }
    }

    /// `kind:id[@version]`, the node name used in exports.
    pub fn key(&self) -> String {
        match self.version {
            Some(v) => format!("{}:{}@{}", self.kind.name(), self.id, v),
            None => format!("{}:{}", self.kind.name(), self.id),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub activity_id: ActivityId,
    pub kind: ActivityKind,
    pub agent: PrincipalId,
    pub inputs: Vec<EntityRef>,
    pub outputs: Vec<EntityRef>,
    #[serde(default)]
    pub params: BTreeMap<String, Scalar>,
    pub started_at: Timestamp,
    pub ended_at: Timestamp,
    pub duration_ms: i64,
}

impl Activity {
    /// Structural invariants; entity existence is the store's concern.
    pub fn validate(&self) -> Result<(), InvalidActivity> {
        if self.ended_at < self.started_at {
            return Err(InvalidActivity::EndsBeforeStart);
        }
        let expected = self.ended_at.millis() - self.started_at.millis();
        if self.duration_ms != expected {
            return Err(InvalidActivity::DurationMismatch { expected, found: self.duration_ms });
        }
        if self.outputs.is_empty() && self.kind != ActivityKind::Login {
            return Err(InvalidActivity::NoOutputs);
        }
        if let Some(e) = self.outputs.iter().find(|o| self.inputs.contains(o)) {
            return Err(InvalidActivity::OutputIsInput(e.key()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum InvalidActivity {
    #[error("ended_at precedes started_at")]
    EndsBeforeStart,
    #[error("duration_ms is {found}, timestamps give {expected}")]
    DurationMismatch { expected: i64, found: i64 },
    #[error("activity has no outputs")]
    NoOutputs,
    #[error("entity {0} is both input and output")]
    OutputIsInput(String),
    #[error("entity {0} does not exist")]
    UnknownEntity(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upstream,
    Downstream,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Node {
    Activity { id: String },
    Entity(EntityRef),
}

impl Node {
    pub fn key(&self) -> String {
        match self {
            Node::Activity { id } => id.clone(),
            Node::Entity(e) => e.key(),
        }
    }
}

/// A traversed lineage sub-graph. Edges follow data flow
/// (input → activity → output); `nodes` is in topological order with ties
/// broken by node key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub root: EntityRef,
    pub direction: Direction,
    pub nodes: Vec<Node>,
    pub edges: Vec<(String, String)>,
    pub activities: Vec<Activity>,
}

impl Lineage {
    pub fn activity_ids(&self) -> BTreeSet<ActivityId> {
        self.activities.iter().map(|a| a.activity_id.clone()).collect()
    }

    pub fn entities(&self) -> BTreeSet<EntityRef> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Entity(e) => Some(e.clone()),
                Node::Activity { .. } => None,
            })
            .collect()
    }

    /// Node key → successor keys.
    pub fn adjacency(&self) -> BTreeMap<String, Vec<String>> {
        let mut adj: BTreeMap<String, Vec<String>> = self.nodes.iter().map(|n| (n.key(), Vec::new())).collect();
        for (from, to) in &self.edges {
            adj.entry(from.clone()).or_default().push(to.clone());
        }
        adj
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph lineage {\n  rankdir=LR;\n");
        for n in &self.nodes {
            let shape = match n {
                Node::Activity { .. } => "box",
                Node::Entity(_) => "ellipse",
            };
            let label = match n {
                Node::Activity { id } => self
                    .activities
                    .iter()
                    .find(|a| a.activity_id.as_str() == id)
                    .map(|a| format!("{id}\\n{:?}", a.kind))
                    .unwrap_or_else(|| id.clone()),
                Node::Entity(e) => e.key(),
            };
            let _ = writeln!(out, "  \"{}\" [shape={shape}, label=\"{label}\"];", n.key());
        }
        for (from, to) in &self.edges {
            let _ = writeln!(out, "  \"{from}\" -> \"{to}\";");
        }
        out.push_str("}\n");
        out
    }
}

/// Walks at most `max_depth` activity hops from `root`.
///
/// Upstream follows producers: activities that list an entity among their
/// outputs, then their inputs. Downstream follows consumers: activities that
/// list an entity among their inputs, then their outputs.
pub fn lineage(activities: &[Activity], root: &EntityRef, direction: Direction, max_depth: usize) -> Lineage {
    let mut seen_entities = BTreeSet::new();
    let mut seen_acts: BTreeSet<&str> = BTreeSet::new();
    let mut picked: Vec<&Activity> = Vec::new();
    let mut edges = BTreeSet::new();
    seen_entities.insert(root.clone());
    let mut frontier = alloc::vec![root.clone()];

    for _ in 0..max_depth {
        let mut next = Vec::new();
        for e in &frontier {
            for act in activities {
                let linked = match direction {
                    Direction::Upstream => act.outputs.contains(e),
                    Direction::Downstream => act.inputs.contains(e),
                };
                if !linked {
                    continue;
                }
                let akey = act.activity_id.as_str();
                match direction {
                    Direction::Upstream => edges.insert((akey.into(), e.key())),
                    Direction::Downstream => edges.insert((e.key(), akey.into())),
                };
                if !seen_acts.insert(akey) {
                    continue;
                }
                picked.push(act);
                let further = match direction {
                    Direction::Upstream => &act.inputs,
                    Direction::Downstream => &act.outputs,
                };
                for f in further {
                    match direction {
                        Direction::Upstream => edges.insert((f.key(), akey.into())),
                        Direction::Downstream => edges.insert((akey.into(), f.key())),
                    };
                    if seen_entities.insert(f.clone()) {
                        next.push(f.clone());
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }

    let mut nodes: Vec<Node> = seen_entities.into_iter().map(Node::Entity).collect();
    nodes.extend(picked.iter().map(|a| Node::Activity { id: a.activity_id.0.clone() }));
    let nodes = topo_order(nodes, &edges);
    let mut acts: Vec<Activity> = picked.into_iter().cloned().collect();
    acts.sort_by(|a, b| a.activity_id.cmp(&b.activity_id));
    Lineage { root: root.clone(), direction, nodes, edges: edges.into_iter().collect(), activities: acts }
}

fn topo_order(nodes: Vec<Node>, edges: &BTreeSet<(String, String)>) -> Vec<Node> {
    let by_key: BTreeMap<String, Node> = nodes.into_iter().map(|n| (n.key(), n)).collect();
    let mut indegree: BTreeMap<&str, usize> = by_key.keys().map(|k| (k.as_str(), 0)).collect();
    for (_, to) in edges {
        if let Some(d) = indegree.get_mut(to.as_str()) {
            *d += 1;
        }
    }
    let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut order: Vec<&str> = Vec::new();
    while let Some(k) = ready.pop_first() {
        order.push(k);
        for (_, to) in edges.iter().filter(|(f, _)| f == k) {
            if let Some(d) = indegree.get_mut(to.as_str()) {
                *d -= 1;
                if *d == 0 {
                    ready.insert(to.as_str());
                }
            }
        }
    }
    // Cycles cannot come from validated activities; keep any leftovers anyway.
    let placed: BTreeSet<&str> = order.iter().copied().collect();
    let rest: Vec<&str> = by_key.keys().map(String::as_str).filter(|k| !placed.contains(k)).collect();
    order.extend(rest);
    order.into_iter().map(|k| by_key[k].clone()).collect()
}

/// Job runs whose dataset outputs fall inside `region`, optionally for one
/// algorithm name and an inclusive `ended_at` window, newest first.
pub fn cumulative_results<'a>(
    activities: &'a [Activity],
    region_of: impl Fn(&EntityRef) -> Option<GeoRegion>,
    region: &GeoRegion,
    algo_name: Option<&str>,
    window: (Option<Timestamp>, Option<Timestamp>),
) -> Vec<(&'a Activity, EntityRef)> {
    let mut out = Vec::new();
    for act in activities.iter().filter(|a| a.kind == ActivityKind::JobRun) {
        if let Some(name) = algo_name {
            if act.params.get("algo_name") != Some(&Scalar::Str(name.into())) {
                continue;
            }
        }
        if window.0.is_some_and(|from| act.ended_at < from) || window.1.is_some_and(|to| act.ended_at > to) {
            continue;
        }
        for o in act.outputs.iter().filter(|o| o.kind == EntityKind::DatasetVersion) {
            if region_of(o).is_some_and(|r| r.intersects(region)) {
                out.push((act, o.clone()));
            }
        }
    }
    out.sort_by(|a, b| b.0.ended_at.cmp(&a.0.ended_at).then_with(|| b.0.activity_id.cmp(&a.0.activity_id)));
    out
}
