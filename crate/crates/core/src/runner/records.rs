//! Append-only prediction log.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::labelmap::ParsedLabel;
use crate::retriever::SimilarityMetric;
use crate::Neighbor;

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub gold: String,
    pub neighbors: Vec<Neighbor>,
    pub raw_reply: String,
    pub parsed: ParsedLabel,
    pub correct: bool,
    pub latency_ms: u64,
    pub from_cache: bool,
    /// Set when no reply could be obtained; the prediction is then unparsed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One line of `raicl retrieve` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalLine {
    pub query_id: String,
    pub metric: SimilarityMetric,
    pub k: usize,
    pub neighbors: Vec<Neighbor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Reads every well-formed record. A missing file yields no records; lines
/// that do not parse (such as a line torn by a crash) are skipped.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, RunError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(RunError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(e) => tracing::warn!(
                "{}:{}: skipping unreadable record: {e}",
                path.display(),
                i + 1
            ),
        }
    }
    Ok(out)
}

pub(super) struct Appender {
    path: PathBuf,
    file: File,
}

impl Appender {
    /// Opens `path` for appending. If the last line is unterminated it is
    /// closed off first so new records start on a fresh line.
    pub(super) fn open(path: &Path) -> Result<Self, RunError> {
        let io = |source| RunError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io)?;
        let len = file.metadata().map_err(io)?.len();
        if len > 0 {
            let mut last = [0u8; 1];
            file.seek(SeekFrom::Start(len - 1)).map_err(io)?;
            file.read_exact(&mut last).map_err(io)?;
            if last[0] != b'\n' {
                file.write_all(b"\n").map_err(io)?;
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub(super) fn append(&mut self, record: &PredictionRecord) -> Result<(), RunError> {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|source| RunError::Io {
                path: self.path.clone(),
                source,
            })
    }
}
