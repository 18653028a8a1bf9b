//! Structured audit log.
//!
//! One NDJSON file per UTC day, `audit/YYYY-MM-DD.ndjson`, one
//! [`AuditEvent`] per line. Each record is written with a single `write`
//! call ending in `\n`; a record cut short by a crash is the only line
//! without a terminator. Reopening terminates such a fragment so later
//! appends start on a fresh line, and readers report it instead of failing.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    Session,
    Reflection,
    Gate,
    Repair,
    Rollback,
    Veto,
    Tool,
    Distill,
    Alarm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub kind: AuditKind,
    pub timestamp: DateTime<Utc>,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptRecord {
    pub file: String,
    pub line: usize,
    /// The record is the unterminated last line of the newest file.
    pub truncated_tail: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AuditRead {
    pub events: Vec<AuditEvent>,
    pub corrupt: Vec<CorruptRecord>,
}

#[derive(Debug)]
enum Sink {
    Memory(Vec<AuditEvent>),
    Dir {
        dir: PathBuf,
        open: Option<(NaiveDate, File)>,
    },
    /// Keeps counters only; used by long simulations.
    Discard,
}

#[derive(Debug)]
pub struct AuditLog {
    sink: Sink,
    next_seq: u64,
    counts: BTreeMap<AuditKind, u64>,
    last: Option<AuditEvent>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::with_sink(Sink::Memory(Vec::new()))
    }

    pub fn discard() -> Self {
        Self::with_sink(Sink::Discard)
    }

    fn with_sink(sink: Sink) -> Self {
        AuditLog {
            sink,
            next_seq: 1,
            counts: BTreeMap::new(),
            last: None,
        }
    }

    /// Opens the log under `dir`, resuming the sequence after the last
    /// readable record.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)?;
        if let Some(newest) = day_files(dir)?.pop() {
            let bytes = std::fs::read(&newest)?;
            if bytes.last().is_some_and(|&b| b != b'\n') {
                OpenOptions::new().append(true).open(&newest)?.write_all(b"\n")?;
            }
        }
        let read = read_dir_events(dir)?;
        let mut log = Self::with_sink(Sink::Dir {
            dir: dir.to_path_buf(),
            open: None,
        });
        for e in &read.events {
            *log.counts.entry(e.kind).or_default() += 1;
            log.next_seq = log.next_seq.max(e.seq + 1);
        }
        log.last = read.events.last().cloned();
        Ok(log)
    }

    pub fn append(
        &mut self,
        kind: AuditKind,
        timestamp: DateTime<Utc>,
        payload: Value,
    ) -> Result<u64, StoreError> {
        let event = AuditEvent {
            seq: self.next_seq,
            kind,
            timestamp,
            payload,
        };
        match &mut self.sink {
            Sink::Memory(events) => events.push(event.clone()),
            Sink::Dir { dir, open } => {
                let day = timestamp.date_naive();
                if open.as_ref().is_none_or(|(d, _)| *d != day) {
                    let path = dir.join(format!("{day}.ndjson"));
                    let file = OpenOptions::new().create(true).append(true).open(path)?;
                    *open = Some((day, file));
                }
                let mut line = serde_json::to_vec(&event).expect("audit event serializes");
                line.push(b'\n');
                let (_, file) = open.as_mut().expect("file opened above");
                file.write_all(&line)?;
            }
            Sink::Discard => {}
        }
        *self.counts.entry(kind).or_default() += 1;
        self.next_seq += 1;
        let seq = event.seq;
        self.last = Some(event);
        Ok(seq)
    }

    pub fn count(&self, kind: AuditKind) -> u64 {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<AuditKind, u64> {
        &self.counts
    }

    pub fn last(&self) -> Option<&AuditEvent> {
        self.last.as_ref()
    }

    pub fn len(&self) -> u64 {
        self.next_seq - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Events with `from <= seq < to`, in sequence order. A discarding log
    /// returns nothing.
    pub fn read(&self, from: u64, to: u64) -> Result<AuditRead, StoreError> {
        let mut read = match &self.sink {
            Sink::Memory(events) => AuditRead {
                events: events.clone(),
                corrupt: Vec::new(),
            },
            Sink::Dir { dir, .. } => read_dir_events(dir)?,
            Sink::Discard => AuditRead::default(),
        };
        read.events.retain(|e| e.seq >= from && e.seq < to);
        Ok(read)
    }

    pub fn read_all(&self) -> Result<AuditRead, StoreError> {
        self.read(0, u64::MAX)
    }
}

fn day_files(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("ndjson"))
        .collect();
    files.sort();
    Ok(files)
}

fn read_dir_events(dir: &Path) -> Result<AuditRead, StoreError> {
    let files = day_files(dir)?;
    let mut read = AuditRead::default();
    for (fi, path) in files.iter().enumerate() {
        let text = String::from_utf8_lossy(&std::fs::read(path)?).into_owned();
        let terminated = text.ends_with('\n');
        let lines: Vec<&str> = text.split_terminator('\n').collect();
        for (li, line) in lines.iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            match serde_json::from_str::<AuditEvent>(line) {
                Ok(e) => read.events.push(e),
                Err(_) => read.corrupt.push(CorruptRecord {
                    file: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                    line: li + 1,
                    truncated_tail: fi + 1 == files.len() && li + 1 == lines.len() && !terminated,
                }),
            }
        }
    }
    read.events.sort_by_key(|e| e.seq);
    Ok(read)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};
    use serde_json::json;

    fn at(h: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2025, 3, 1, 0, 0, 0).unwrap() + Duration::hours(h)
    }

    #[test]
    fn append_then_read_last() {
        let mut log = AuditLog::in_memory();
        log.append(AuditKind::Gate, at(0), json!({"a": 1})).unwrap();
        let seq = log.append(AuditKind::Veto, at(1), json!({"b": 2})).unwrap();
        let all = log.read_all().unwrap();
        assert_eq!(all.events.last().unwrap().seq, seq);
        assert_eq!(all.events.last(), log.last());
        assert_eq!(log.count(AuditKind::Gate), 1);
    }

    #[test]
    fn files_split_by_day_and_seq_resumes() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut log = AuditLog::open(dir.path()).unwrap();
            for h in 0..30 {
                log.append(AuditKind::Session, at(h), json!({"h": h})).unwrap();
            }
        }
        assert_eq!(day_files(dir.path()).unwrap().len(), 2);
        let mut log = AuditLog::open(dir.path()).unwrap();
        assert_eq!(log.append(AuditKind::Alarm, at(31), json!({})).unwrap(), 31);
        let seqs: Vec<u64> = log.read_all().unwrap().events.iter().map(|e| e.seq).collect();
        assert_eq!(seqs, (1..=31).collect::<Vec<_>>());
    }

    #[test]
    fn truncated_tail_flagged_and_prior_records_kept() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut log = AuditLog::open(dir.path()).unwrap();
            for h in 0..3 {
                log.append(AuditKind::Gate, at(h), json!({"h": h})).unwrap();
            }
        }
        let file = day_files(dir.path()).unwrap().pop().unwrap();
        let mut f = OpenOptions::new().append(true).open(&file).unwrap();
        f.write_all(br#"{"seq":4,"kind":"ga"#).unwrap();
        drop(f);

        let read = read_dir_events(dir.path()).unwrap();
        assert_eq!(read.events.len(), 3);
        assert_eq!(read.corrupt.len(), 1);
        assert!(read.corrupt[0].truncated_tail);

        let mut log = AuditLog::open(dir.path()).unwrap();
        assert_eq!(log.append(AuditKind::Gate, at(4), json!({})).unwrap(), 4);
        let read = log.read_all().unwrap();
        assert_eq!(read.events.len(), 4);
        assert_eq!(read.corrupt.len(), 1);
        assert!(!read.corrupt[0].truncated_tail);
    }

    #[test]
    fn discard_counts_only() {
        let mut log = AuditLog::discard();
        log.append(AuditKind::Distill, at(0), json!({})).unwrap();
        assert_eq!(log.count(AuditKind::Distill), 1);
        assert!(log.read_all().unwrap().events.is_empty());
    }
}
