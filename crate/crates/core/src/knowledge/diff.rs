use std::collections::{HashMap, HashSet};

use serde::Serialize;

use super::{
    Component, DeltaOp, Entry, EntryPayload, KnowledgeDelta, KnowledgeState, Proposer,
};

/// Per-component edit lists turning one state into another.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ComponentDiff {
    /// `(position in the target list, entry)`, in increasing position order.
    pub inserts: Vec<(usize, EntryPayload)>,
    /// `(before, after)` for entries kept in place whose content changed.
    pub modifies: Vec<(EntryPayload, EntryPayload)>,
    pub deletes: Vec<EntryPayload>,
}

impl ComponentDiff {
    pub fn is_empty(&self) -> bool {
        self.inserts.is_empty() && self.modifies.is_empty() && self.deletes.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StateDiff {
    pub from_hash: String,
    pub to_hash: String,
    #[serde(rename = "S")]
    pub s: ComponentDiff,
    #[serde(rename = "U")]
    pub u: ComponentDiff,
    #[serde(rename = "T")]
    pub t: ComponentDiff,
}

impl StateDiff {
    pub fn is_empty(&self) -> bool {
        self.s.is_empty() && self.u.is_empty() && self.t.is_empty()
    }

    /// A delta reproducing the diff: deletes, then modifies, then inserts at
    /// their final positions.
    pub fn to_delta(&self) -> KnowledgeDelta {
        let parts = [(&self.s, Component::S), (&self.u, Component::U), (&self.t, Component::T)];
        let mut ops = Vec::new();
        for (d, component) in parts {
            ops.extend(d.deletes.iter().map(|e| DeltaOp::Delete {
                component,
                target_id: e.key().to_string(),
                snapshot: Some(e.clone()),
            }));
        }
        for (d, _) in parts {
            ops.extend(d.modifies.iter().map(|(_, after)| DeltaOp::Modify {
                target_id: after.key().to_string(),
                entry: after.clone(),
            }));
        }
        for (d, _) in parts {
            ops.extend(d.inserts.iter().map(|(pos, e)| DeltaOp::Insert {
                entry: e.clone(),
                position: Some(*pos),
            }));
        }
        KnowledgeDelta::new(ops, Proposer::Manual).with_rationale("kind", "diff")
    }
}

pub fn diff_states(a: &KnowledgeState, b: &KnowledgeState) -> StateDiff {
    StateDiff {
        from_hash: a.content_hash().to_string(),
        to_hash: b.content_hash().to_string(),
        s: diff_component(a.instructions(), b.instructions()),
        u: diff_component(a.preferences(), b.preferences()),
        t: diff_component(a.tools(), b.tools()),
    }
}

/// Entries keep their place when they belong to a longest run of shared ids
/// in common relative order; shared ids outside that run are reported as a
/// delete plus an insert (a move).
fn diff_component<E: Entry>(a: &[E], b: &[E]) -> ComponentDiff {
    let a_pos: HashMap<&str, usize> = a.iter().enumerate().map(|(i, e)| (e.key(), i)).collect();
    // Positions in `a` of shared ids, listed in `b` order.
    let shared: Vec<(usize, usize)> = b
        .iter()
        .enumerate()
        .filter_map(|(j, e)| a_pos.get(e.key()).map(|&i| (j, i)))
        .collect();
    let keep_idx = longest_increasing(&shared.iter().map(|&(_, i)| i).collect::<Vec<_>>());
    let kept_b: HashSet<usize> = keep_idx.iter().map(|&k| shared[k].0).collect();
    let kept_a: HashSet<usize> = keep_idx.iter().map(|&k| shared[k].1).collect();

    let mut diff = ComponentDiff::default();
    for (i, e) in a.iter().enumerate() {
        if !kept_a.contains(&i) {
            diff.deletes.push(e.clone().into_payload());
        }
    }
    for (j, e) in b.iter().enumerate() {
        if kept_b.contains(&j) {
            let before = &a[a_pos[e.key()]];
            if before != e {
                diff.modifies
                    .push((before.clone().into_payload(), e.clone().into_payload()));
            }
        } else {
            diff.inserts.push((j, e.clone().into_payload()));
        }
    }
    diff
}

/// Indices into `seq` of one longest strictly increasing subsequence.
fn longest_increasing(seq: &[usize]) -> Vec<usize> {
    let mut tails: Vec<usize> = Vec::new(); // index into seq of the tail for each length
    let mut prev: Vec<Option<usize>> = vec![None; seq.len()];
    for (i, &v) in seq.iter().enumerate() {
        let len = tails.partition_point(|&t| seq[t] < v);
        if len > 0 {
            prev[i] = Some(tails[len - 1]);
        }
        if len == tails.len() {
            tails.push(i);
        } else {
            tails[len] = i;
        }
    }
    let mut out = Vec::with_capacity(tails.len());
    let mut cur = tails.last().copied();
    while let Some(i) = cur {
        out.push(i);
        cur = prev[i];
    }
    out.reverse();
    out
}
