use std::path::{Component as PathComponent, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DENYLIST: [&str; 5] = ["sudo", "chmod", "curl", "wget", "eval("];

/// Literal, case-sensitive substrings that disqualify tool code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Denylist {
    patterns: Vec<String>,
}

impl Default for Denylist {
    fn default() -> Self {
        Denylist {
            patterns: DEFAULT_DENYLIST.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Denylist {
    pub fn new(patterns: Vec<String>) -> Result<Self, String> {
        if patterns.is_empty() {
            return Err("denylist must not be empty".into());
        }
        if patterns.iter().any(String::is_empty) {
            return Err("denylist patterns must not be empty strings".into());
        }
        Ok(Denylist { patterns })
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }
}

impl TryFrom<Vec<String>> for Denylist {
    type Error = String;
    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        Denylist::new(v)
    }
}

impl From<Denylist> for Vec<String> {
    fn from(d: Denylist) -> Self {
        d.patterns
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Location {
    Code,
    Parameter { index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub pattern: String,
    pub location: Location,
    /// Byte offset of the match within the scanned text.
    pub offset: usize,
    pub excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub violations: Vec<Violation>,
    pub passed: bool,
}

const EXCERPT_CONTEXT: usize = 16;

fn excerpt(text: &str, start: usize, len: usize) -> String {
    let mut lo = start.saturating_sub(EXCERPT_CONTEXT);
    while !text.is_char_boundary(lo) {
        lo -= 1;
    }
    let mut hi = (start + len + EXCERPT_CONTEXT).min(text.len());
    while !text.is_char_boundary(hi) {
        hi += 1;
    }
    text[lo..hi].to_string()
}

/// Reports every occurrence of every pattern in the code and in file-like
/// parameters. Nothing is executed.
pub fn scan_tool(code: &str, file_params: &[&str], denylist: &Denylist) -> PolicyReport {
    let texts = std::iter::once((Location::Code, code)).chain(
        file_params
            .iter()
            .enumerate()
            .map(|(index, p)| (Location::Parameter { index }, *p)),
    );
    let mut violations = Vec::new();
    for (location, text) in texts {
        for pattern in denylist.patterns() {
            for (offset, m) in text.match_indices(pattern.as_str()) {
                violations.push(Violation {
                    pattern: pattern.clone(),
                    location,
                    offset,
                    excerpt: excerpt(text, offset, m.len()),
                });
            }
        }
    }
    PolicyReport {
        passed: violations.is_empty(),
        violations,
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum PathViolation {
    #[error("empty path")]
    Empty,
    #[error("path contains a NUL byte")]
    NulByte,
    #[error("absolute path {path:?}")]
    Absolute { path: String },
    #[error("traversal segment in {path:?}")]
    Traversal { path: String },
    #[error("{path:?} resolves outside the sandbox")]
    Escapes { path: String },
}

/// Validates a file-like name for use under `sandbox_root` and returns it
/// normalized (separators unified, `.` and empty segments dropped).
///
/// Symlinks already present under the root are resolved, so a link that
/// points outside the sandbox is rejected as well.
pub fn validate_path(name: &str, sandbox_root: &Path) -> Result<PathBuf, PathViolation> {
    let path = name.to_string();
    if name.contains('\0') {
        return Err(PathViolation::NulByte);
    }
    let looks_absolute = name.starts_with('/')
        || name.starts_with('\\')
        || name.as_bytes().get(1) == Some(&b':')
        || Path::new(name).has_root();
    if looks_absolute {
        return Err(PathViolation::Absolute { path });
    }
    let mut normalized = PathBuf::new();
    for seg in name.split(['/', '\\']) {
        match seg {
            "" | "." => {}
            ".." => return Err(PathViolation::Traversal { path }),
            s => normalized.push(s),
        }
    }
    if normalized.as_os_str().is_empty() {
        return Err(PathViolation::Empty);
    }
    // Lexically the path is now confined; resolve what exists on disk.
    if let Ok(root) = sandbox_root.canonicalize() {
        let mut probe = root.clone();
        for part in normalized.components() {
            if let PathComponent::Normal(p) = part {
                probe.push(p);
            }
            match probe.canonicalize() {
                Ok(real) if !real.starts_with(&root) => {
                    return Err(PathViolation::Escapes { path })
                }
                Ok(_) => {}
                Err(_) => break,
            }
        }
    }
    Ok(normalized)
}
