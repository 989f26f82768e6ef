//! Append-only JSON-lines journal, one file per session.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::session::JournalEvent;
use crate::ServiceError;

pub const JOURNAL_EXTENSION: &str = "jsonl";

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    pub fn path_for(dir: &Path, session_id: &str) -> PathBuf {
        dir.join(format!("{session_id}.{JOURNAL_EXTENSION}"))
    }

    /// Opens for appending, creating the file if needed.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one event and syncs it to disk before returning.
    pub fn append(&mut self, event: &JournalEvent) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// Reads every complete event. A torn final line (a crash mid-write) is
/// dropped; a malformed line anywhere else is an error.
pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<JournalEvent>, ServiceError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => out.push(e),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => {
                return Err(ServiceError::Journal(format!(
                    "{} line {}: {e}",
                    path.display(),
                    i + 1
                )));
            }
        }
    }
    Ok(out)
}

/// Like [`read_events`], but also truncates a torn final line so that later
/// appends start on a fresh line.
pub fn recover(path: impl AsRef<Path>) -> Result<Vec<JournalEvent>, ServiceError> {
    let path = path.as_ref();
    let events = read_events(path)?;
    let bytes = std::fs::read(path)?;
    if !bytes.is_empty() && bytes.last() != Some(&b'\n') {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if serde_json::from_slice::<JournalEvent>(&bytes[keep..]).is_ok() {
            OpenOptions::new()
                .append(true)
                .open(path)?
                .write_all(b"\n")?;
        } else {
            OpenOptions::new()
                .write(true)
                .open(path)?
                .set_len(keep as u64)?;
        }
    }
    Ok(events)
}
