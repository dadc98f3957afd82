//! Per-feed log of records skipped by the MetaFeed sandbox.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use serde_json::json;

use super::record::Record;
use super::Role;
use crate::cluster::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorEntry {
    pub tick: u64,
    pub feed: String,
    pub role: Role,
    pub node: NodeId,
    pub exception: String,
    pub payload: String,
}

impl ErrorEntry {
    /// One tab-separated line; tabs and newlines inside fields are escaped.
    pub fn to_line(&self) -> String {
        let esc = |s: &str| s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n");
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.tick,
            esc(&self.feed),
            self.role,
            self.node,
            esc(&self.exception),
            esc(&self.payload)
        )
    }

    /// Record form for the reserved error dataset.
    pub fn to_record(&self, seq: u64) -> Record {
        let v = json!({
            "errorId": format!("{}-{seq}", self.feed),
            "tick": self.tick,
            "feed": self.feed,
            "role": self.role.as_str(),
            "node": self.node.to_string(),
            "exception": self.exception,
            "payload": self.payload,
        });
        Record::from_json(&v.to_string()).expect("object literal")
    }
}

/// Appends entries to `logs/<feed>.errors.log` under an optional root and
/// keeps them in memory for inspection.
#[derive(Debug, Default)]
pub struct ErrorLog {
    dir: Option<PathBuf>,
    writers: BTreeMap<String, BufWriter<File>>,
    entries: Vec<ErrorEntry>,
}

impl ErrorLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Log files go to `<root>/logs/`.
    pub fn with_root(root: impl Into<PathBuf>) -> Self {
        ErrorLog { dir: Some(root.into().join("logs")), writers: BTreeMap::new(), entries: Vec::new() }
    }

    pub fn path_for(&self, feed: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{feed}.errors.log")))
    }

    pub fn append(&mut self, entry: ErrorEntry) -> io::Result<()> {
        if let Some(path) = self.path_for(&entry.feed) {
            if !self.writers.contains_key(&entry.feed) {
                fs::create_dir_all(path.parent().expect("log path has a parent"))?;
                let f = OpenOptions::new().create(true).append(true).open(&path)?;
                self.writers.insert(entry.feed.clone(), BufWriter::new(f));
            }
            let w = self.writers.get_mut(&entry.feed).expect("writer opened above");
            writeln!(w, "{}", entry.to_line())?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[ErrorEntry] {
        &self.entries
    }

    pub fn count_for(&self, feed: &str) -> usize {
        self.entries.iter().filter(|e| e.feed == feed).count()
    }

    pub fn flush(&mut self) -> io::Result<()> {
        for w in self.writers.values_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

impl Drop for ErrorLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
