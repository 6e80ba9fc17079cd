//! Shared plumbing for the line-delimited JSON files (libraries, scenarios,
//! suites, audit logs). Line 1 is a header naming the format and version;
//! every following non-blank line is one record.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line 1: bad header: {0}")]
    BadHeader(String),
    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("line {line}: corrupt record: {reason}")]
    CorruptRecord { line: usize, reason: String },
    #[error("line {line}: duplicate content hash {hash}")]
    DuplicateHash { line: usize, hash: String },
}

impl FormatError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn corrupt(line: usize, reason: impl Into<String>) -> Self {
        FormatError::CorruptRecord {
            line,
            reason: reason.into(),
        }
    }

    /// 1-based line number the error refers to, if any.
    pub fn line(&self) -> Option<usize> {
        match self {
            FormatError::BadHeader(_) | FormatError::UnsupportedVersion { .. } => Some(1),
            FormatError::CorruptRecord { line, .. } | FormatError::DuplicateHash { line, .. } => Some(*line),
            FormatError::Io { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header<E> {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub extra: E,
}

/// Parsed file: header extras plus (line number, record) pairs.
pub struct Parsed<E, R> {
    pub header: E,
    pub records: Vec<(usize, R)>,
}

pub fn parse<E, R>(text: &str, format: &str, version: u32) -> Result<Parsed<E, R>, FormatError>
where
    E: DeserializeOwned,
    R: DeserializeOwned,
{
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| FormatError::BadHeader("file is empty".into()))?;
    let raw: serde_json::Value =
        serde_json::from_str(first).map_err(|e| FormatError::BadHeader(e.to_string()))?;
    let found_format = raw.get("format").and_then(|v| v.as_str()).unwrap_or_default();
    if found_format != format {
        return Err(FormatError::BadHeader(format!(
            "expected format {format:?}, found {found_format:?}"
        )));
    }
    let found_version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| FormatError::BadHeader("missing version".into()))?;
    if found_version != version as u64 {
        return Err(FormatError::UnsupportedVersion {
            found: found_version.min(u32::MAX as u64) as u32,
            expected: version,
        });
    }
    let header: Header<E> =
        serde_json::from_value(raw).map_err(|e| FormatError::BadHeader(e.to_string()))?;

    let mut records = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| FormatError::corrupt(line_no, e.to_string()))?;
        records.push((line_no, rec));
    }
    Ok(Parsed {
        header: header.extra,
        records,
    })
}

pub fn read_file(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|e| FormatError::io(path, e))
}

/// Serializes a header and records, one JSON object per line.
pub fn render<E: Serialize, R: Serialize>(format: &str, version: u32, extra: E, records: &[R]) -> String {
    let header = Header {
        format: format.to_string(),
        version,
        extra,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Writes via a sibling temp file and rename so readers never observe a
/// partially written file.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let tmp = temp_sibling(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

pub(crate) fn temp_sibling(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[derive(Serialize, Deserialize, Default)]
    struct NoExtra {}

    #[test]
    fn header_checks() {
        let ok = "{\"format\":\"x\",\"version\":1}\n{\"a\":1}\n\n";
        let p: Parsed<NoExtra, Value> = parse(ok, "x", 1).unwrap();
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.records[0].0, 2);

        let bad_fmt = "{\"format\":\"y\",\"version\":1}\n";
        assert!(matches!(parse::<NoExtra, Value>(bad_fmt, "x", 1), Err(FormatError::BadHeader(_))));

        let bad_ver = "{\"format\":\"x\",\"version\":999}\n";
        assert!(matches!(
            parse::<NoExtra, Value>(bad_ver, "x", 1),
            Err(FormatError::UnsupportedVersion { found: 999, .. })
        ));

        let corrupt = "{\"format\":\"x\",\"version\":1}\n{\"a\":1}\nnot json\n";
        let err = parse::<NoExtra, Value>(corrupt, "x", 1).err().unwrap();
        assert_eq!(err.line(), Some(3));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        write_atomic(&p, "one").unwrap();
        write_atomic(&p, "two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert!(!temp_sibling(&p).exists());
    }
}
