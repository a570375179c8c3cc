//! Line-record (JSONL) manifests shared by every dataset loader.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}, entry `{id}`: field `{field}`: {message}")]
    Invalid {
        line: usize,
        id: String,
        field: String,
        message: String,
    },
}

impl ManifestError {
    pub(crate) fn invalid(
        line: usize,
        id: impl Into<String>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        ManifestError::Invalid {
            line,
            id: id.into(),
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Parses every non-blank line of `text` as one record, returning each with
/// its 1-based line number.
pub fn parse_records<T: DeserializeOwned>(text: &str) -> Result<Vec<(usize, T)>, ManifestError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| ManifestError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push((idx + 1, record));
    }
    Ok(out)
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_records(&text)
}

/// Like [`read_records`] but a missing file reads as empty, and an
/// unterminated final line (a torn append) is ignored.
pub fn read_log<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ManifestError> {
    let text = match fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(ManifestError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let complete = match text.rfind('\n') {
        Some(end) => &text[..=end],
        None => "",
    };
    Ok(parse_records(complete)?.into_iter().map(|(_, r)| r).collect())
}

/// Serializes records one per line, each terminated by `\n`.
pub fn to_jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_records<T: Serialize>(
    path: &Path,
    records: impl IntoIterator<Item = T>,
) -> Result<(), ManifestError> {
    fs::write(path, to_jsonl(records)).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })
}
