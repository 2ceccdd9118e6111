//! The run journal: a totally ordered, timestamped log of every runtime
//! mutation. Treatment labeling reads timestamps from here and nowhere
//! else.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    /// Experiment-clock timestamp, epoch milliseconds.
    pub t_ms: u64,
    #[serde(flatten)]
    pub event: JournalEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JournalEvent {
    SueBuilt {
        services: Vec<String>,
    },
    EnvPatched {
        service: String,
        key: String,
        value: String,
    },
    ConfigPatched {
        service: String,
        path: String,
    },
    SueStarting {
        backend: String,
    },
    ServiceReady {
        service: String,
    },
    SueReady,
    LoadStarted,
    LoadFinished,
    TreatmentApplied {
        treatment: String,
        action: String,
        service: String,
    },
    TreatmentReverted {
        treatment: String,
    },
    /// Window close of a non-revertible treatment (kill has no recovery).
    TreatmentExpired {
        treatment: String,
    },
    TreatmentFailed {
        treatment: String,
        error: String,
    },
    TreatmentSkipped {
        treatment: String,
        reason: String,
    },
    ServicePaused {
        service: String,
    },
    ServiceUnpaused {
        service: String,
    },
    ServiceKilled {
        service: String,
    },
    Exec {
        service: String,
        command: Vec<String>,
        exit_code: i64,
    },
    CollectStarted {
        response: String,
    },
    TeardownStarted,
    ServiceStopped {
        service: String,
        pre_terminated: bool,
    },
    TornDown,
    Warning {
        message: String,
    },
}

/// Append-only journal with one writer. When a sink path is set, entries
/// are written as newline-delimited JSON, one flush per append.
#[derive(Debug, Default)]
pub struct Journal {
    inner: Mutex<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    entries: Vec<JournalEntry>,
    sink: Option<BufWriter<File>>,
    next_seq: u64,
}

impl Journal {
    pub fn new() -> Self {
        Journal::default()
    }

    /// Attach an NDJSON sink; existing entries are written out first.
    pub fn attach_sink(&self, path: &Path) -> std::io::Result<()> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = BufWriter::new(file);
        let mut inner = self.inner.lock().expect("journal poisoned");
        for entry in &inner.entries {
            writeln!(
                writer,
                "{}",
                serde_json::to_string(entry).expect("entry serializes")
            )?;
        }
        writer.flush()?;
        inner.sink = Some(writer);
        Ok(())
    }

    pub fn append(&self, t_ms: u64, event: JournalEvent) -> JournalEntry {
        let mut inner = self.inner.lock().expect("journal poisoned");
        let entry = JournalEntry {
            seq: inner.next_seq,
            t_ms,
            event,
        };
        inner.next_seq += 1;
        if let Some(sink) = inner.sink.as_mut() {
            // best effort: a full disk must not abort the experiment here
            let line = serde_json::to_string(&entry).expect("entry serializes");
            let _ = writeln!(sink, "{line}");
            let _ = sink.flush();
        }
        inner.entries.push(entry.clone());
        entry
    }

    pub fn entries(&self) -> Vec<JournalEntry> {
        self.inner.lock().expect("journal poisoned").entries.clone()
    }

    /// First entry matching the predicate.
    pub fn find<F: Fn(&JournalEvent) -> bool>(&self, pred: F) -> Option<JournalEntry> {
        self.inner
            .lock()
            .expect("journal poisoned")
            .entries
            .iter()
            .find(|e| pred(&e.event))
            .cloned()
    }

    pub fn flush(&self) {
        if let Some(sink) = self.inner.lock().expect("journal poisoned").sink.as_mut() {
            let _ = sink.flush();
        }
    }
}

/// Parse a journal written as NDJSON.
pub fn read_journal(text: &str) -> Result<Vec<JournalEntry>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
