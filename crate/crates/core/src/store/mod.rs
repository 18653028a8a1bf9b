//! Content-addressed, append-only commit store for knowledge states.
//!
//! On-disk layout under the store root:
//!
//! ```text
//! HEAD                     id of the newest commit, no trailing newline
//! commits/<id>.json        {"meta":{...},"parent":<id|null>,"state_hash":<hex>}
//! objects/<hash>.json      state document (schema_version first)
//! tags/<label>.json        {"commit":<id>,"kind":"good"|"quarantine","label":<label>}
//! audit/YYYY-MM-DD.ndjson  see [`audit`]
//! ```
//!
//! A commit id is the lowercase hex SHA-256 of the compact JSON of its
//! `{meta, parent, state_hash}` with keys sorted. Every file is written to a
//! temporary name and renamed into place, and HEAD moves last, so a crash
//! leaves at worst an unreferenced object or commit file.

pub mod audit;
pub mod git;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{diff_states, digest_hex, KnowledgeState, StateDiff};

pub use audit::{AuditEvent, AuditKind, AuditLog, AuditRead};
pub use git::GitMirror;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Author {
    System,
    Admin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitReason {
    /// Candidate state deployed for evaluation.
    Provisional,
    Accept,
    Repair,
    Rollback,
    Veto,
    Quarantine,
    Manual,
}

// Fields in lexicographic order so the derived serialization is canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitMeta {
    pub author: Author,
    pub candidate_id: Option<String>,
    pub reason: CommitReason,
    pub timestamp: DateTime<Utc>,
}

impl CommitMeta {
    pub fn system(reason: CommitReason, candidate_id: Option<&str>, at: DateTime<Utc>) -> Self {
        CommitMeta {
            author: Author::System,
            candidate_id: candidate_id.map(str::to_string),
            reason,
            timestamp: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commit {
    pub id: String,
    pub meta: CommitMeta,
    pub parent: Option<String>,
    pub state_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CommitBody {
    meta: CommitMeta,
    parent: Option<String>,
    state_hash: String,
}

pub fn commit_id(meta: &CommitMeta, parent: Option<&str>, state_hash: &str) -> String {
    let body = CommitBody {
        meta: meta.clone(),
        parent: parent.map(str::to_string),
        state_hash: state_hash.to_string(),
    };
    digest_hex(&serde_json::to_vec(&body).expect("commit body serializes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagKind {
    Good,
    Quarantine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tag {
    pub commit: String,
    pub kind: TagKind,
    pub label: String,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown ref {0}")]
    UnknownRef(String),
    #[error("tag {0} already exists")]
    DuplicateLabel(String),
    #[error("invalid tag label {0:?}")]
    InvalidLabel(String),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Storage(e.to_string())
    }
}

/// Result of [`CommitStore::revert_to`].
#[derive(Debug, Clone)]
pub struct Revert {
    pub state: Arc<KnowledgeState>,
    pub commit: Commit,
    /// Kind of the tag the ref named, if it was a tag.
    pub tag_kind: Option<TagKind>,
}

/// Linear history of knowledge states. Mutations happen only through the
/// single writer; readers clone the `Arc`s they need.
#[derive(Debug, Default)]
pub struct CommitStore {
    root: Option<PathBuf>,
    commits: HashMap<String, Commit>,
    chain: Vec<String>,
    objects: HashMap<String, Arc<KnowledgeState>>,
    tags: BTreeMap<String, Tag>,
    mirror: Option<GitMirror>,
}

fn valid_label(label: &str) -> bool {
    !label.is_empty()
        && label.len() <= 128
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !label.starts_with('.')
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

impl CommitStore {
    pub fn in_memory() -> Self {
        CommitStore::default()
    }

    /// Opens (or initializes) a store rooted at `root`.
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        for sub in ["commits", "objects", "tags"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        let mut store = CommitStore {
            root: Some(root.to_path_buf()),
            ..CommitStore::default()
        };
        let head = match std::fs::read_to_string(root.join("HEAD")) {
            Ok(s) => Some(s.trim().to_string()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let mut cursor = head;
        let mut chain = Vec::new();
        while let Some(id) = cursor {
            let raw = std::fs::read(root.join("commits").join(format!("{id}.json")))
                .map_err(|e| StoreError::Corrupt(format!("commit {id}: {e}")))?;
            let body: CommitBody = serde_json::from_slice(&raw)
                .map_err(|e| StoreError::Corrupt(format!("commit {id}: {e}")))?;
            if commit_id(&body.meta, body.parent.as_deref(), &body.state_hash) != id {
                return Err(StoreError::Corrupt(format!("commit {id} does not match its content")));
            }
            if !store.objects.contains_key(&body.state_hash) {
                let raw = std::fs::read(root.join("objects").join(format!("{}.json", body.state_hash)))
                    .map_err(|e| StoreError::Corrupt(format!("object {}: {e}", body.state_hash)))?;
                let state = KnowledgeState::from_json(&raw)
                    .map_err(|e| StoreError::Corrupt(format!("object {}: {e}", body.state_hash)))?;
                if state.content_hash() != body.state_hash {
                    return Err(StoreError::Corrupt(format!("object {} hash mismatch", body.state_hash)));
                }
                store.objects.insert(body.state_hash.clone(), Arc::new(state));
            }
            cursor = body.parent.clone();
            if store.commits.contains_key(&id) {
                return Err(StoreError::Corrupt("cycle in parent chain".into()));
            }
            store.commits.insert(
                id.clone(),
                Commit {
                    id: id.clone(),
                    meta: body.meta,
                    parent: body.parent,
                    state_hash: body.state_hash,
                },
            );
            chain.push(id);
        }
        chain.reverse();
        store.chain = chain;
        for entry in std::fs::read_dir(root.join("tags"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let tag: Tag = serde_json::from_slice(&std::fs::read(&path)?)
                .map_err(|e| StoreError::Corrupt(format!("tag {}: {e}", path.display())))?;
            if !store.commits.contains_key(&tag.commit) {
                return Err(StoreError::Corrupt(format!("tag {} names unknown commit", tag.label)));
            }
            store.tags.insert(tag.label.clone(), tag);
        }
        Ok(store)
    }

    pub fn with_mirror(mut self, mirror: GitMirror) -> Self {
        self.mirror = Some(mirror);
        self
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn head(&self) -> Option<&Commit> {
        self.chain.last().map(|id| &self.commits[id])
    }

    pub fn head_state(&self) -> Option<Arc<KnowledgeState>> {
        self.head().map(|c| self.objects[&c.state_hash].clone())
    }

    pub fn len(&self) -> usize {
        self.chain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chain.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Commit> {
        self.commits.get(id)
    }

    /// Commits from root to head.
    pub fn log(&self) -> impl DoubleEndedIterator<Item = &Commit> + ExactSizeIterator {
        self.chain.iter().map(|id| &self.commits[id])
    }

    pub fn state(&self, commit_id: &str) -> Option<Arc<KnowledgeState>> {
        let c = self.commits.get(commit_id)?;
        self.objects.get(&c.state_hash).cloned()
    }

    pub fn tags(&self) -> impl Iterator<Item = &Tag> {
        self.tags.values()
    }

    pub fn tag(&self, label: &str) -> Option<&Tag> {
        self.tags.get(label)
    }

    /// Resolves `HEAD`, a tag label or a commit id.
    pub fn resolve(&self, reference: &str) -> Result<&Commit, StoreError> {
        if reference == "HEAD" {
            return self.head().ok_or_else(|| StoreError::UnknownRef(reference.into()));
        }
        if let Some(tag) = self.tags.get(reference) {
            return Ok(&self.commits[&tag.commit]);
        }
        self.commits
            .get(reference)
            .ok_or_else(|| StoreError::UnknownRef(reference.into()))
    }

    /// Appends `state` on top of HEAD. Committing the state and metadata HEAD
    /// already carries returns HEAD unchanged.
    pub fn commit_state(
        &mut self,
        state: &KnowledgeState,
        meta: CommitMeta,
    ) -> Result<Commit, StoreError> {
        if let Some(head) = self.head() {
            if head.state_hash == state.content_hash() && head.meta == meta {
                return Ok(head.clone());
            }
        }
        let parent = self.chain.last().cloned();
        let state_hash = state.content_hash().to_string();
        let id = commit_id(&meta, parent.as_deref(), &state_hash);
        let commit = Commit {
            id: id.clone(),
            meta,
            parent,
            state_hash: state_hash.clone(),
        };
        let new_object = !self.objects.contains_key(&state_hash);
        if let Some(root) = &self.root {
            if new_object {
                write_atomic(
                    &root.join("objects").join(format!("{state_hash}.json")),
                    state.to_document_json().as_bytes(),
                )?;
            }
            let body = CommitBody {
                meta: commit.meta.clone(),
                parent: commit.parent.clone(),
                state_hash: state_hash.clone(),
            };
            write_atomic(
                &root.join("commits").join(format!("{id}.json")),
                &serde_json::to_vec(&body).expect("commit body serializes"),
            )?;
            write_atomic(&root.join("HEAD"), id.as_bytes())?;
        }
        if new_object {
            self.objects.insert(state_hash, Arc::new(state.clone()));
        }
        self.commits.insert(id.clone(), commit.clone());
        self.chain.push(id);
        if let Some(m) = &mut self.mirror {
            if let Err(e) = m.record(state, &commit) {
                tracing::warn!(error = %e, "git mirror commit failed");
            }
        }
        Ok(commit)
    }

    /// Appends the commits and tags of `other` that this store lacks. This
    /// store's history must be a prefix of `other`'s.
    pub fn catch_up(&mut self, other: &CommitStore) -> Result<usize, StoreError> {
        let prefix = self.chain.len() <= other.chain.len()
            && self.chain.iter().zip(&other.chain).all(|(a, b)| a == b);
        if !prefix {
            return Err(StoreError::Corrupt(
                "stored history is not a prefix of the replayed history".into(),
            ));
        }
        let missing = other.chain[self.chain.len()..].to_vec();
        for id in &missing {
            let c = &other.commits[id];
            let made = self.commit_state(&other.objects[&c.state_hash], c.meta.clone())?;
            if &made.id != id {
                return Err(StoreError::Corrupt(format!("replayed commit {id} came out as {}", made.id)));
            }
        }
        for tag in other.tags.values() {
            if !self.tags.contains_key(&tag.label) {
                self.tag_commit(&tag.commit, &tag.label, tag.kind)?;
            }
        }
        Ok(missing.len())
    }

    /// Tags are immutable once created.
    pub fn tag_commit(&mut self, commit: &str, label: &str, kind: TagKind) -> Result<Tag, StoreError> {
        if !valid_label(label) {
            return Err(StoreError::InvalidLabel(label.into()));
        }
        if self.tags.contains_key(label) {
            return Err(StoreError::DuplicateLabel(label.into()));
        }
        let commit = self.resolve(commit)?.id.clone();
        let tag = Tag {
            commit,
            kind,
            label: label.to_string(),
        };
        if let Some(root) = &self.root {
            write_atomic(
                &root.join("tags").join(format!("{label}.json")),
                &serde_json::to_vec(&tag).expect("tag serializes"),
            )?;
        }
        if let Some(m) = &mut self.mirror {
            if let Err(e) = m.tag(&tag) {
                tracing::warn!(error = %e, "git mirror tag failed");
            }
        }
        self.tags.insert(label.to_string(), tag.clone());
        Ok(tag)
    }

    /// Most recent tag of `kind`, by position of the tagged commit in history.
    pub fn latest_tag(&self, kind: TagKind) -> Option<&Tag> {
        let pos: HashMap<&str, usize> = self
            .chain
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        self.tags
            .values()
            .filter(|t| t.kind == kind)
            .max_by_key(|t| (pos.get(t.commit.as_str()).copied(), t.label.clone()))
    }

    /// Restores the state named by `reference` as a new commit on HEAD.
    pub fn revert_to(&mut self, reference: &str, meta: CommitMeta) -> Result<Revert, StoreError> {
        let target = self.resolve(reference)?.clone();
        let tag_kind = self.tags.get(reference).map(|t| t.kind);
        let state = self.objects[&target.state_hash].clone();
        let commit = self.commit_state(&state, meta)?;
        Ok(Revert {
            state,
            commit,
            tag_kind,
        })
    }

    pub fn diff_commits(&self, a: &str, b: &str) -> Result<StateDiff, StoreError> {
        let sa = self.objects[&self.resolve(a)?.state_hash].clone();
        let sb = self.objects[&self.resolve(b)?.state_hash].clone();
        Ok(diff_states(&sa, &sb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::fixtures::*;
    use crate::knowledge::{apply_delta, Section};
    use chrono::Duration;

    fn meta(reason: CommitReason, minutes: i64) -> CommitMeta {
        CommitMeta::system(reason, None, t0() + Duration::minutes(minutes))
    }

    fn state(texts: &[&str]) -> KnowledgeState {
        let s = texts
            .iter()
            .enumerate()
            .map(|(i, t)| instruction(&format!("i{i}"), Section::Global, t))
            .collect();
        KnowledgeState::new(s, vec![], vec![]).unwrap()
    }

    #[test]
    fn identical_commit_is_idempotent() {
        let mut st = CommitStore::in_memory();
        let a = st.commit_state(&state(&["x"]), meta(CommitReason::Manual, 0)).unwrap();
        let b = st.commit_state(&state(&["x"]), meta(CommitReason::Manual, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(st.len(), 1);
    }

    #[test]
    fn commit_id_is_content_derived() {
        let m = meta(CommitReason::Accept, 1);
        assert_eq!(commit_id(&m, Some("p"), "h"), commit_id(&m, Some("p"), "h"));
        assert_ne!(commit_id(&m, Some("p"), "h"), commit_id(&m, None, "h"));
    }

    #[test]
    fn revert_records_rollback_commit() {
        let mut st = CommitStore::in_memory();
        let base = st.commit_state(&state(&["x"]), meta(CommitReason::Manual, 0)).unwrap();
        st.tag_commit(&base.id, "good-1", TagKind::Good).unwrap();
        st.commit_state(&state(&["y"]), meta(CommitReason::Accept, 1)).unwrap();
        let r = st.revert_to("good-1", meta(CommitReason::Rollback, 2)).unwrap();
        assert_eq!(r.commit.state_hash, base.state_hash);
        assert_eq!(r.tag_kind, Some(TagKind::Good));
        assert_eq!(r.state.canonical_bytes(), st.state(&base.id).unwrap().canonical_bytes());
        assert_eq!(st.len(), 3);
        assert!(matches!(
            st.revert_to("nope", meta(CommitReason::Rollback, 3)),
            Err(StoreError::UnknownRef(_))
        ));
    }

    #[test]
    fn tags_are_immutable_and_validated() {
        let mut st = CommitStore::in_memory();
        let c = st.commit_state(&state(&[]), meta(CommitReason::Manual, 0)).unwrap();
        st.tag_commit(&c.id, "good-1", TagKind::Good).unwrap();
        assert!(matches!(
            st.tag_commit(&c.id, "good-1", TagKind::Quarantine),
            Err(StoreError::DuplicateLabel(_))
        ));
        assert!(matches!(
            st.tag_commit(&c.id, "../x", TagKind::Good),
            Err(StoreError::InvalidLabel(_))
        ));
    }

    #[test]
    fn diff_of_same_commit_is_empty() {
        let mut st = CommitStore::in_memory();
        let a = st.commit_state(&state(&["x"]), meta(CommitReason::Manual, 0)).unwrap();
        assert!(st.diff_commits(&a.id, &a.id).unwrap().is_empty());
        let b = st.commit_state(&state(&["x", "y"]), meta(CommitReason::Accept, 1)).unwrap();
        let d = st.diff_commits(&a.id, &b.id).unwrap();
        assert_eq!(d.s.inserts.len(), 1);
        let rebuilt = apply_delta(&st.state(&a.id).unwrap(), &d.to_delta()).unwrap();
        assert_eq!(rebuilt.content_hash(), b.state_hash);
    }

    #[test]
    fn filesystem_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = CommitStore::open(dir.path()).unwrap();
        let mut ids = Vec::new();
        for i in 0..20 {
            let texts: Vec<String> = (0..=i % 4).map(|k| format!("t{i}-{k}")).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            ids.push(st.commit_state(&state(&refs), meta(CommitReason::Accept, i)).unwrap().id);
        }
        st.tag_commit(&ids[5], "good-5", TagKind::Good).unwrap();
        st.tag_commit(&ids[9], "q-9", TagKind::Quarantine).unwrap();
        let re = CommitStore::open(dir.path()).unwrap();
        assert_eq!(re.log().map(|c| c.id.clone()).collect::<Vec<_>>(), ids);
        for id in &ids {
            assert_eq!(re.state(id).unwrap().canonical_bytes(), st.state(id).unwrap().canonical_bytes());
        }
        assert_eq!(re.latest_tag(TagKind::Good).unwrap().label, "good-5");
        assert_eq!(re.tag("q-9").unwrap().kind, TagKind::Quarantine);
    }

    #[test]
    fn unreferenced_commit_file_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = CommitStore::open(dir.path()).unwrap();
        let a = st.commit_state(&state(&["x"]), meta(CommitReason::Manual, 0)).unwrap();
        // A crash after writing a commit file but before moving HEAD.
        std::fs::write(dir.path().join("commits/deadbeef.json"), b"{}").unwrap();
        let re = CommitStore::open(dir.path()).unwrap();
        assert_eq!(re.head().unwrap().id, a.id);
    }

    #[test]
    fn tampered_commit_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = CommitStore::open(dir.path()).unwrap();
        let a = st.commit_state(&state(&["x"]), meta(CommitReason::Manual, 0)).unwrap();
        let path = dir.path().join(format!("commits/{}.json", a.id));
        let text = std::fs::read_to_string(&path).unwrap().replace("manual", "accept");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(CommitStore::open(dir.path()), Err(StoreError::Corrupt(_))));
    }
}
