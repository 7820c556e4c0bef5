//! Copy-on-write overlays over immutable snapshots, their net diff against
//! the base, and record-level three-way merge against a moved head.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::canonical::Digest;
use crate::ids::RecordId;
use crate::schema::Record;

/// Materialized dataset contents, ordered by record id.
pub type Snapshot = BTreeMap<RecordId, Record>;

/// Record id → digest, the shape of a stored version index.
pub type Index = BTreeMap<RecordId, Digest>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op", content = "record")]
pub enum OverlayOp {
    Upsert(Record),
    Delete,
}

impl OverlayOp {
    fn target(&self) -> Option<Digest> {
        match self {
            OverlayOp::Upsert(r) => Some(r.digest),
            OverlayOp::Delete => None,
        }
    }
}

/// Pending edits for one dataset; the latest op per record id wins.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub ops: BTreeMap<RecordId, OverlayOp>,
}

impl Overlay {
    pub fn write(&mut self, record_id: RecordId, op: OverlayOp) {
        self.ops.insert(record_id, op);
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Base with upserts replacing or extending and deletes removing.
    pub fn apply(&self, base: &Snapshot) -> Snapshot {
        let mut out = base.clone();
        for (id, op) in &self.ops {
            match op {
                OverlayOp::Upsert(r) => {
                    out.insert(id.clone(), r.clone());
                }
                OverlayOp::Delete => {
                    out.remove(id);
                }
            }
        }
        out
    }

    /// Net effect against the base, with no-op entries dropped.
    pub fn diff(&self, base: &Index) -> DatasetChanges {
        let mut changes = DatasetChanges::default();
        for (id, op) in &self.ops {
            match (op, base.get(id)) {
                (OverlayOp::Upsert(r), None) => changes.added.push(r.clone()),
                (OverlayOp::Upsert(r), Some(old)) if *old != r.digest => changes.modified.push(Modified {
                    record_id: id.clone(),
                    old_digest: *old,
                    new_digest: r.digest,
                    record: r.clone(),
                }),
                (OverlayOp::Delete, Some(_)) => changes.deleted.push(id.clone()),
                _ => {}
            }
        }
        changes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modified {
    pub record_id: RecordId,
    pub old_digest: Digest,
    pub new_digest: Digest,
    pub record: Record,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetChanges {
    pub added: Vec<Record>,
    pub modified: Vec<Modified>,
    pub deleted: Vec<RecordId>,
}

impl DatasetChanges {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.modified.is_empty() && self.deleted.is_empty()
    }

    /// `(added, modified, deleted)`.
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.added.len(), self.modified.len(), self.deleted.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    AbortOnConflict,
    /// Overlay wins conflicts.
    Ours,
    /// Head wins conflicts; the overlay entry is dropped.
    Theirs,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MergePlan {
    /// New head contents; `changed` is false when it equals the current head.
    Apply {
        contents: Snapshot,
        changed: bool,
        conflicts_resolved: Vec<RecordId>,
    },
    Conflicts(Vec<RecordId>),
}

/// Three-way merge of `overlay` (made against `base`) onto `head`.
///
/// A record conflicts when the head changed it since the base and the
/// overlay also changed it, to a different outcome than the head's.
/// Deletion is an outcome like any digest.
pub fn plan_merge(base: &Index, head: &Snapshot, overlay: &Overlay, strategy: MergeStrategy) -> MergePlan {
    let mut contents = head.clone();
    let mut conflicts = Vec::new();
    for (id, op) in &overlay.ops {
        let base_d = base.get(id).copied();
        let head_d = head.get(id).map(|r| r.digest);
        let ours = op.target();
        if ours == base_d {
            continue;
        }
        let head_moved = head_d != base_d;
        if head_moved && ours != head_d {
            conflicts.push(id.clone());
            if strategy != MergeStrategy::Ours {
                continue;
            }
        }
        match op {
            OverlayOp::Upsert(r) => {
                contents.insert(id.clone(), r.clone());
            }
            OverlayOp::Delete => {
                contents.remove(id);
            }
        }
    }
    if strategy == MergeStrategy::AbortOnConflict && !conflicts.is_empty() {
        return MergePlan::Conflicts(conflicts);
    }
    let changed = contents.len() != head.len()
        || contents.iter().zip(head.iter()).any(|((ka, a), (kb, b))| ka != kb || a.digest != b.digest);
    MergePlan::Apply { contents, changed, conflicts_resolved: conflicts }
}

pub fn index_of(snapshot: &Snapshot) -> Index {
    snapshot.iter().map(|(k, r)| (k.clone(), r.digest)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Value;
    use alloc::string::String;

    fn rec(id: &str, v: i64) -> Record {
        let mut values = BTreeMap::new();
        values.insert(String::from("v"), Value::Integer(v));
        Record::new(id.into(), values)
    }

    fn snap(items: &[(&str, i64)]) -> Snapshot {
        items.iter().map(|(id, v)| (RecordId::new(*id), rec(id, *v))).collect()
    }

    #[test]
    fn delete_and_upsert_set_algebra() {
        let base = snap(&[("a", 1), ("b", 2)]);
        let mut o = Overlay::default();
        o.write("a".into(), OverlayOp::Delete);
        o.write("c".into(), OverlayOp::Upsert(rec("c", 3)));
        let ids: Vec<_> = o.apply(&base).into_keys().collect();
        assert_eq!(ids, [RecordId::new("b"), RecordId::new("c")]);
    }

    #[test]
    fn delete_then_upsert_nets_to_modify() {
        let base = snap(&[("a", 1)]);
        let mut o = Overlay::default();
        o.write("a".into(), OverlayOp::Delete);
        o.write("a".into(), OverlayOp::Upsert(rec("a", 9)));
        assert_eq!(o.diff(&index_of(&base)).counts(), (0, 1, 0));
    }

    #[test]
    fn no_op_entries_drop_out_of_diff() {
        let base = snap(&[("a", 1)]);
        let mut o = Overlay::default();
        o.write("a".into(), OverlayOp::Upsert(rec("a", 1)));
        o.write("zz".into(), OverlayOp::Delete);
        assert!(o.diff(&index_of(&base)).is_empty());
    }

    #[test]
    fn fast_forward_when_head_unmoved() {
        let base = snap(&[("a", 1), ("b", 2)]);
        let mut o = Overlay::default();
        o.write("a".into(), OverlayOp::Upsert(rec("a", 5)));
        o.write("b".into(), OverlayOp::Delete);
        let MergePlan::Apply { contents, changed, conflicts_resolved } =
            plan_merge(&index_of(&base), &base, &o, MergeStrategy::AbortOnConflict)
        else {
            panic!("expected apply")
        };
        assert!(changed && conflicts_resolved.is_empty());
        assert_eq!(contents, snap(&[("a", 5)]));
    }

    #[test]
    fn divergent_edit_conflicts_and_strategies_resolve() {
        let base = snap(&[("r", 1)]);
        let head = snap(&[("r", 2)]);
        let mut o = Overlay::default();
        o.write("r".into(), OverlayOp::Upsert(rec("r", 3)));
        let idx = index_of(&base);
        assert_eq!(
            plan_merge(&idx, &head, &o, MergeStrategy::AbortOnConflict),
            MergePlan::Conflicts(alloc::vec![RecordId::new("r")])
        );
        let MergePlan::Apply { contents, .. } = plan_merge(&idx, &head, &o, MergeStrategy::Ours) else { panic!() };
        assert_eq!(contents, snap(&[("r", 3)]));
        let MergePlan::Apply { contents, changed, .. } = plan_merge(&idx, &head, &o, MergeStrategy::Theirs) else { panic!() };
        assert_eq!(contents, head);
        assert!(!changed);
    }

    #[test]
    fn convergent_edits_do_not_conflict() {
        let base = snap(&[("r", 1)]);
        let head = snap(&[("r", 2)]);
        let mut o = Overlay::default();
        o.write("r".into(), OverlayOp::Upsert(rec("r", 2)));
        assert!(matches!(
            plan_merge(&index_of(&base), &head, &o, MergeStrategy::AbortOnConflict),
            MergePlan::Apply { changed: false, .. }
        ));
    }
}
