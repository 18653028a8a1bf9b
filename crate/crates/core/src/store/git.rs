//! Optional mirror of the commit history into a git working tree.
//!
//! Each store commit becomes a git commit of `knowledge.json` whose message
//! carries the store commit id and reason; tags are mirrored as lightweight
//! git tags. The store never reads from the mirror.

use std::path::{Path, PathBuf};
use std::process::Command;

use super::{Commit, Tag};
use crate::knowledge::KnowledgeState;

#[derive(Debug, Clone)]
pub struct GitMirror {
    dir: PathBuf,
}

impl GitMirror {
    /// Initializes `dir` as a git repository if it is not one already.
    pub fn init(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mirror = GitMirror {
            dir: dir.to_path_buf(),
        };
        if !dir.join(".git").exists() {
            mirror.git(&["init", "--quiet"])?;
        }
        Ok(mirror)
    }

    fn git(&self, args: &[&str]) -> std::io::Result<()> {
        let out = Command::new("git")
            .arg("-C")
            .arg(&self.dir)
            .args(["-c", "user.name=ilws-forge", "-c", "user.email=ilws-forge@localhost"])
            .args(args)
            .output()?;
        if out.status.success() {
            Ok(())
        } else {
            Err(std::io::Error::other(
                String::from_utf8_lossy(&out.stderr).trim().to_string(),
            ))
        }
    }

    pub fn record(&mut self, state: &KnowledgeState, commit: &Commit) -> std::io::Result<()> {
        std::fs::write(self.dir.join("knowledge.json"), state.to_document_json())?;
        self.git(&["add", "knowledge.json"])?;
        let reason = serde_json::to_value(commit.meta.reason).expect("reason serializes");
        let message = format!(
            "{} {}\n\nstore-commit: {}\nstate-hash: {}",
            reason.as_str().unwrap_or("commit"),
            commit.meta.candidate_id.as_deref().unwrap_or("-"),
            commit.id,
            commit.state_hash
        );
        self.git(&["commit", "--quiet", "--allow-empty", "-m", &message])
    }

    pub fn tag(&mut self, tag: &Tag) -> std::io::Result<()> {
        self.git(&["tag", &tag.label])
    }
}
