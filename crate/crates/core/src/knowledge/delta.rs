use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    token_count, Component, Entry, EntryPayload, InstructionEntry, KnowledgeState, ToolEntry,
    UserPreference,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposer {
    Reflection,
    Repair,
    Manual,
}

/// One typed edit. Inserts without a position append; deletes may carry a
/// snapshot of the removed entry, which must match the live entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeltaOp {
    Insert {
        entry: EntryPayload,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        position: Option<usize>,
    },
    Modify {
        target_id: String,
        entry: EntryPayload,
    },
    Delete {
        component: Component,
        target_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        snapshot: Option<EntryPayload>,
    },
}

impl DeltaOp {
    pub fn component(&self) -> Component {
        match self {
            DeltaOp::Insert { entry, .. } | DeltaOp::Modify { entry, .. } => entry.component(),
            DeltaOp::Delete { component, .. } => *component,
        }
    }

    pub fn size(&self) -> usize {
        match self {
            DeltaOp::Insert { entry, .. } | DeltaOp::Modify { entry, .. } => {
                token_count(entry.sized_text())
            }
            DeltaOp::Delete { snapshot, .. } => snapshot
                .as_ref()
                .map_or(0, |e| token_count(e.sized_text())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDelta {
    pub ops: Vec<DeltaOp>,
    #[serde(default)]
    pub rationale: BTreeMap<String, serde_json::Value>,
    pub proposed_by: Proposer,
}

impl KnowledgeDelta {
    pub fn new(ops: Vec<DeltaOp>, proposed_by: Proposer) -> Self {
        KnowledgeDelta {
            ops,
            rationale: BTreeMap::new(),
            proposed_by,
        }
    }

    pub fn empty(proposed_by: Proposer) -> Self {
        Self::new(Vec::new(), proposed_by)
    }

    pub fn with_rationale(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.rationale.insert(key.to_string(), value.into());
        self
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Concatenation: `self` then `other`.
    pub fn then(mut self, other: KnowledgeDelta) -> KnowledgeDelta {
        self.ops.extend(other.ops);
        self.rationale.extend(other.rationale);
        self
    }

    pub fn check_rationale(&self) -> Result<(), DeltaError> {
        let needs = matches!(self.proposed_by, Proposer::Reflection | Proposer::Repair);
        if needs && self.rationale.is_empty() {
            return Err(DeltaError::InvariantViolation {
                op_index: None,
                reason: "reflection and repair deltas need a rationale".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeltaError {
    #[error("op {op_index}: no {component} entry with id {id}")]
    UnknownTarget {
        op_index: usize,
        component: Component,
        id: String,
    },
    #[error("op {op_index}: {component} already contains id {id}")]
    DuplicateId {
        op_index: usize,
        component: Component,
        id: String,
    },
    #[error("invariant violation{}: {reason}", op_index.map(|i| format!(" at op {i}")).unwrap_or_default())]
    InvariantViolation {
        op_index: Option<usize>,
        reason: String,
    },
}

/// Total whitespace-token count over the textual payloads of all ops.
pub fn delta_size(delta: &KnowledgeDelta) -> usize {
    delta.ops.iter().map(DeltaOp::size).sum()
}

/// Applies the ops in order. Any failure aborts the whole delta; the input
/// state is never modified.
pub fn apply_delta(
    state: &KnowledgeState,
    delta: &KnowledgeDelta,
) -> Result<KnowledgeState, DeltaError> {
    delta.check_rationale()?;
    let mut work = Working::from(state);
    for (i, op) in delta.ops.iter().enumerate() {
        work.apply(i, op)?;
    }
    Ok(work.finish())
}

/// Delta that undoes `delta` when applied to `apply_delta(state_before, delta)`.
pub fn invert_delta(
    state_before: &KnowledgeState,
    delta: &KnowledgeDelta,
) -> Result<KnowledgeDelta, DeltaError> {
    let mut work = Working::from(state_before);
    let mut inverse = Vec::with_capacity(delta.ops.len());
    for (i, op) in delta.ops.iter().enumerate() {
        inverse.push(work.inverse_of(i, op)?);
        work.apply(i, op)?;
    }
    inverse.reverse();
    Ok(KnowledgeDelta::new(inverse, Proposer::Manual).with_rationale("kind", "inverse"))
}

struct Working {
    s: Vec<InstructionEntry>,
    u: Vec<UserPreference>,
    t: Vec<ToolEntry>,
}

impl From<&KnowledgeState> for Working {
    fn from(k: &KnowledgeState) -> Self {
        Working {
            s: k.instructions.clone(),
            u: k.preferences.clone(),
            t: k.tools.clone(),
        }
    }
}

impl Working {
    fn finish(self) -> KnowledgeState {
        KnowledgeState::from_parts_unchecked(self.s, self.u, self.t)
    }

    fn apply(&mut self, i: usize, op: &DeltaOp) -> Result<(), DeltaError> {
        match op {
            DeltaOp::Insert { entry, position } => match entry {
                EntryPayload::S(e) => insert(&mut self.s, i, e, *position),
                EntryPayload::U(e) => insert(&mut self.u, i, e, *position),
                EntryPayload::T(e) => insert(&mut self.t, i, e, *position),
            },
            DeltaOp::Modify { target_id, entry } => match entry {
                EntryPayload::S(e) => modify(&mut self.s, i, target_id, e),
                EntryPayload::U(e) => modify(&mut self.u, i, target_id, e),
                EntryPayload::T(e) => modify(&mut self.t, i, target_id, e),
            },
            DeltaOp::Delete {
                component,
                target_id,
                snapshot,
            } => {
                if let Some(snap) = snapshot {
                    if snap.component() != *component {
                        return Err(violation(i, "snapshot component differs from op"));
                    }
                }
                let snapshot = snapshot.as_ref();
                match component {
                    Component::S => delete(&mut self.s, i, target_id, snapshot).map(drop),
                    Component::U => delete(&mut self.u, i, target_id, snapshot).map(drop),
                    Component::T => delete(&mut self.t, i, target_id, snapshot).map(drop),
                }
            }
        }
    }

    fn lookup(&self, component: Component, id: &str) -> Option<(usize, EntryPayload)> {
        fn find<E: Entry>(list: &[E], id: &str) -> Option<(usize, EntryPayload)> {
            list.iter()
                .position(|e| e.key() == id)
                .map(|p| (p, list[p].clone().into_payload()))
        }
        match component {
            Component::S => find(&self.s, id),
            Component::U => find(&self.u, id),
            Component::T => find(&self.t, id),
        }
    }

    fn inverse_of(&self, i: usize, op: &DeltaOp) -> Result<DeltaOp, DeltaError> {
        let missing = |component, id: &str| DeltaError::UnknownTarget {
            op_index: i,
            component,
            id: id.to_string(),
        };
        Ok(match op {
            DeltaOp::Insert { entry, .. } => DeltaOp::Delete {
                component: entry.component(),
                target_id: entry.key().to_string(),
                snapshot: Some(entry.clone()),
            },
            DeltaOp::Modify { target_id, entry } => {
                let (_, old) = self
                    .lookup(entry.component(), target_id)
                    .ok_or_else(|| missing(entry.component(), target_id))?;
                DeltaOp::Modify {
                    target_id: entry.key().to_string(),
                    entry: old,
                }
            }
            DeltaOp::Delete {
                component,
                target_id,
                ..
            } => {
                let (pos, old) = self
                    .lookup(*component, target_id)
                    .ok_or_else(|| missing(*component, target_id))?;
                DeltaOp::Insert {
                    entry: old,
                    position: Some(pos),
                }
            }
        })
    }
}

fn violation(i: usize, reason: impl Into<String>) -> DeltaError {
    DeltaError::InvariantViolation {
        op_index: Some(i),
        reason: reason.into(),
    }
}

fn insert<E: Entry>(
    list: &mut Vec<E>,
    i: usize,
    entry: &E,
    position: Option<usize>,
) -> Result<(), DeltaError> {
    entry.validate().map_err(|r| violation(i, r))?;
    if list.iter().any(|e| e.key() == entry.key()) {
        return Err(DeltaError::DuplicateId {
            op_index: i,
            component: E::COMPONENT,
            id: entry.key().to_string(),
        });
    }
    let at = position.unwrap_or(list.len());
    if at > list.len() {
        return Err(violation(
            i,
            format!("insert position {at} beyond {} entries", list.len()),
        ));
    }
    list.insert(at, entry.clone());
    Ok(())
}

fn modify<E: Entry>(list: &mut [E], i: usize, target: &str, entry: &E) -> Result<(), DeltaError> {
    entry.validate().map_err(|r| violation(i, r))?;
    let pos = list
        .iter()
        .position(|e| e.key() == target)
        .ok_or_else(|| DeltaError::UnknownTarget {
            op_index: i,
            component: E::COMPONENT,
            id: target.to_string(),
        })?;
    if entry.key() != target {
        return Err(violation(i, "modify cannot change an entry's id"));
    }
    list[pos] = entry.clone();
    Ok(())
}

fn delete<E: Entry>(
    list: &mut Vec<E>,
    i: usize,
    target: &str,
    snapshot: Option<&EntryPayload>,
) -> Result<E, DeltaError> {
    let pos = list
        .iter()
        .position(|e| e.key() == target)
        .ok_or_else(|| DeltaError::UnknownTarget {
            op_index: i,
            component: E::COMPONENT,
            id: target.to_string(),
        })?;
    if let Some(snap) = snapshot {
        if *snap != list[pos].clone().into_payload() {
            return Err(violation(i, "delete snapshot does not match the live entry"));
        }
    }
    Ok(list.remove(pos))
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::super::{Section, ToolStatus};
    use super::*;

    fn ins_s(id: &str, text: &str) -> DeltaOp {
        DeltaOp::Insert {
            entry: EntryPayload::S(instruction(id, Section::Global, text)),
            position: None,
        }
    }

    fn del_s(id: &str) -> DeltaOp {
        DeltaOp::Delete {
            component: Component::S,
            target_id: id.into(),
            snapshot: None,
        }
    }

    fn manual(ops: Vec<DeltaOp>) -> KnowledgeDelta {
        KnowledgeDelta::new(ops, Proposer::Manual)
    }

    #[test]
    fn empty_delta_is_identity() {
        let k = KnowledgeState::new(vec![instruction("a", Section::Global, "x")], vec![], vec![])
            .unwrap();
        let out = apply_delta(&k, &manual(vec![])).unwrap();
        assert_eq!(out.content_hash(), k.content_hash());
        assert_eq!(invert_delta(&k, &manual(vec![])).unwrap().ops, vec![]);
    }

    #[test]
    fn insert_case_study_instruction() {
        let k = KnowledgeState::empty();
        let out = apply_delta(&k, &manual(vec![ins_s("i1", "php-fpm serves web traffic")])).unwrap();
        assert_eq!(out.instructions().len(), 1);
        assert_eq!(out.instructions()[0].id, "i1");
        assert!(k.instructions().is_empty());
    }

    #[test]
    fn double_delete_fails_atomically() {
        let k = KnowledgeState::new(
            vec![
                instruction("i1", Section::Global, "x"),
                instruction("i2", Section::Global, "y"),
            ],
            vec![],
            vec![],
        )
        .unwrap();
        let err = apply_delta(&k, &manual(vec![del_s("i1"), del_s("i1")])).unwrap_err();
        assert_eq!(
            err,
            DeltaError::UnknownTarget {
                op_index: 1,
                component: Component::S,
                id: "i1".into()
            }
        );
        assert_eq!(k.instructions().len(), 2);
    }

    #[test]
    fn order_sensitivity() {
        let k = KnowledgeState::new(vec![instruction("i1", Section::Global, "x")], vec![], vec![])
            .unwrap();
        assert!(apply_delta(&k, &manual(vec![del_s("i1"), ins_s("i1", "z")])).is_ok());
        assert!(matches!(
            apply_delta(&k, &manual(vec![ins_s("i1", "z"), del_s("i1")])),
            Err(DeltaError::DuplicateId { op_index: 0, .. })
        ));
    }

    #[test]
    fn invert_insert_is_delete() {
        let k = KnowledgeState::empty();
        let d = manual(vec![ins_s("i1", "hello")]);
        let inv = invert_delta(&k, &d).unwrap();
        assert!(matches!(
            &inv.ops[..],
            [DeltaOp::Delete { component: Component::S, target_id, .. }] if target_id == "i1"
        ));
    }

    #[test]
    fn invert_modify_swaps_text() {
        let k = KnowledgeState::new(vec![instruction("i1", Section::Global, "a")], vec![], vec![])
            .unwrap();
        let d = manual(vec![DeltaOp::Modify {
            target_id: "i1".into(),
            entry: EntryPayload::S(instruction("i1", Section::Global, "b")),
        }]);
        let inv = invert_delta(&k, &d).unwrap();
        match &inv.ops[0] {
            DeltaOp::Modify {
                entry: EntryPayload::S(e),
                ..
            } => assert_eq!(e.text, "a"),
            other => panic!("unexpected {other:?}"),
        }
        let after = apply_delta(&k, &d).unwrap();
        let back = apply_delta(&after, &inv).unwrap();
        assert_eq!(back.canonical_bytes(), k.canonical_bytes());
    }

    #[test]
    fn sizes() {
        assert_eq!(delta_size(&manual(vec![])), 0);
        let twelve = "one two three four five six seven eight nine ten eleven twelve";
        let thirty = vec!["tok"; 30].join(" ");
        let d = manual(vec![
            ins_s("i1", twelve),
            DeltaOp::Insert {
                entry: EntryPayload::T(tool("t", &thirty, ToolStatus::Quarantined)),
                position: None,
            },
        ]);
        assert_eq!(delta_size(&d), 42);
        let m = manual(vec![DeltaOp::Modify {
            target_id: "i1".into(),
            entry: EntryPayload::S(instruction("i1", Section::Global, "a b c d e")),
        }]);
        assert_eq!(delta_size(&m), 5);
    }

    #[test]
    fn stale_snapshot_rejected() {
        let k = KnowledgeState::new(vec![instruction("i1", Section::Global, "x")], vec![], vec![])
            .unwrap();
        let d = manual(vec![DeltaOp::Delete {
            component: Component::S,
            target_id: "i1".into(),
            snapshot: Some(EntryPayload::S(instruction("i1", Section::Global, "stale"))),
        }]);
        assert!(matches!(
            apply_delta(&k, &d),
            Err(DeltaError::InvariantViolation { .. })
        ));
    }

    #[test]
    fn reflection_delta_needs_rationale() {
        let d = KnowledgeDelta::new(vec![], Proposer::Reflection);
        assert!(apply_delta(&KnowledgeState::empty(), &d).is_err());
        let d = d.with_rationale("summary", "noop");
        assert!(apply_delta(&KnowledgeState::empty(), &d).is_ok());
    }

    #[test]
    fn insert_position_bounds() {
        let d = manual(vec![DeltaOp::Insert {
            entry: EntryPayload::U(preference("k", "v")),
            position: Some(1),
        }]);
        assert!(apply_delta(&KnowledgeState::empty(), &d).is_err());
    }
}
