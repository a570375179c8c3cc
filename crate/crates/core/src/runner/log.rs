//! Single-writer, fsync-on-append line logs.
//!
//! One background thread owns every open log file. Callers send serialized
//! lines over a channel and get an acknowledgement only after the line has
//! been written and synced, so an acknowledged record survives a crash.
//! Appends may carry a dedup key (a field name plus value); a key already
//! present in the file is acknowledged without writing.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use serde::Serialize;
use thiserror::Error;
use tokio::sync::oneshot;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("appending to {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("log writer has shut down")]
    Closed,
    #[error("serializing record: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Field whose value must be unique within one log file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DedupKey {
    pub field: &'static str,
    pub value: String,
}

impl DedupKey {
    pub fn new(field: &'static str, value: impl Into<String>) -> Self {
        DedupKey {
            field,
            value: value.into(),
        }
    }
}

struct Command {
    path: PathBuf,
    line: String,
    key: Option<DedupKey>,
    ack: oneshot::Sender<Result<bool, LogError>>,
}

/// Cheap to clone; all clones feed the same writer thread.
#[derive(Clone)]
pub struct Appender {
    tx: mpsc::Sender<Command>,
}

impl Appender {
    pub fn spawn() -> Self {
        let (tx, rx) = mpsc::channel::<Command>();
        thread::Builder::new()
            .name("trajlab-log".into())
            .spawn(move || writer_loop(rx))
            .expect("spawning log writer thread");
        Appender { tx }
    }

    /// Appends one record as a JSON line. Returns `false` when the dedup key
    /// was already logged and nothing was written.
    pub async fn append<T: Serialize>(
        &self,
        path: &Path,
        record: &T,
        key: Option<DedupKey>,
    ) -> Result<bool, LogError> {
        let line = serde_json::to_string(record)?;
        let (ack, done) = oneshot::channel();
        self.tx
            .send(Command {
                path: path.to_path_buf(),
                line,
                key,
                ack,
            })
            .map_err(|_| LogError::Closed)?;
        done.await.map_err(|_| LogError::Closed)?
    }
}

struct OpenLog {
    file: File,
    keys: HashMap<&'static str, HashSet<String>>,
}

fn writer_loop(rx: mpsc::Receiver<Command>) {
    let mut logs: HashMap<PathBuf, OpenLog> = HashMap::new();
    for cmd in rx {
        let result = handle(&mut logs, &cmd).map_err(|source| LogError::Io {
            path: cmd.path.clone(),
            source,
        });
        if result.is_err() {
            // Reopen next time; the handle may be in an unknown state.
            logs.remove(&cmd.path);
        }
        let _ = cmd.ack.send(result);
    }
}

fn handle(logs: &mut HashMap<PathBuf, OpenLog>, cmd: &Command) -> io::Result<bool> {
    if !logs.contains_key(&cmd.path) {
        logs.insert(cmd.path.clone(), open_log(&cmd.path)?);
    }
    let log = logs.get_mut(&cmd.path).expect("inserted above");
    if let Some(key) = &cmd.key {
        if !log.keys.contains_key(key.field) {
            let seen = scan_keys(&mut log.file, key.field)?;
            log.keys.insert(key.field, seen);
        }
        if log.keys[key.field].contains(&key.value) {
            return Ok(false);
        }
    }
    let mut line = Vec::with_capacity(cmd.line.len() + 1);
    line.extend_from_slice(cmd.line.as_bytes());
    line.push(b'\n');
    log.file.write_all(&line)?;
    log.file.sync_data()?;
    if let Some(key) = &cmd.key {
        log.keys
            .get_mut(key.field)
            .expect("scanned above")
            .insert(key.value.clone());
    }
    Ok(true)
}

/// Opens for append, dropping a torn final line left by an earlier crash.
fn open_log(path: &Path) -> io::Result<OpenLog> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if !bytes.is_empty() && bytes.last() != Some(&b'\n') {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        file.set_len(keep as u64)?;
        file.sync_data()?;
    }
    file.seek(SeekFrom::End(0))?;
    Ok(OpenLog {
        file,
        keys: HashMap::new(),
    })
}

fn scan_keys(file: &mut File, field: &str) -> io::Result<HashSet<String>> {
    let mut text = String::new();
    file.seek(SeekFrom::Start(0))?;
    file.read_to_string(&mut text)?;
    file.seek(SeekFrom::End(0))?;
    Ok(text
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter_map(|v| v.get(field).and_then(|k| k.as_str()).map(String::from))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[tokio::test]
    async fn appends_dedups_and_repairs_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/log.jsonl");
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, "{\"id\":\"a\"}\n{\"id\":\"b\"").unwrap();

        let log = Appender::spawn();
        let key = |v: &str| Some(DedupKey::new("id", v));
        assert!(!log.append(&path, &json!({"id": "a"}), key("a")).await.unwrap());
        assert!(log.append(&path, &json!({"id": "b"}), key("b")).await.unwrap());
        assert!(!log.append(&path, &json!({"id": "b"}), key("b")).await.unwrap());
        assert!(log.append(&path, &json!({"id": "c", "x": 1}), None).await.unwrap());

        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "{\"id\":\"a\"}\n{\"id\":\"b\"}\n{\"id\":\"c\",\"x\":1}\n");
    }

    #[tokio::test]
    async fn concurrent_appends_stay_line_atomic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let log = Appender::spawn();
        let tasks: Vec<_> = (0..64)
            .map(|i| {
                let log = log.clone();
                let path = path.clone();
                tokio::spawn(async move {
                    let id = (i % 32).to_string();
                    log.append(&path, &json!({ "id": id }), Some(DedupKey::new("id", id.clone())))
                        .await
                        .unwrap()
                })
            })
            .collect();
        let mut written = 0;
        for t in tasks {
            written += t.await.unwrap() as usize;
        }
        assert_eq!(written, 32);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 32);
        assert!(text.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    }
}
