use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{GenerationParams, ModelError, ModelReply};
use crate::promptkit::{ChatTranscript, ContentPart};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content digest of a request: model name, parameters and the transcript
/// with every image replaced by the SHA-256 of its bytes.
pub fn cache_key(
    model_name: &str,
    params: &GenerationParams,
    transcript: &ChatTranscript,
) -> Result<String, ModelError> {
    let mut messages = Vec::with_capacity(transcript.messages.len());
    for m in &transcript.messages {
        let mut parts = Vec::with_capacity(m.parts.len());
        for p in &m.parts {
            parts.push(match p {
                ContentPart::Text { text } => json!({"kind": "text", "text": text}),
                ContentPart::Image { image_ref } => {
                    let bytes = fs::read(image_ref).map_err(|e| ModelError::Input {
                        path: image_ref.clone(),
                        message: e.to_string(),
                    })?;
                    json!({"kind": "image", "sha256": sha256_hex(&bytes)})
                }
            });
        }
        messages.push(json!({"role": m.role, "parts": parts}));
    }
    let doc: Value = json!({
        "model": model_name,
        "params": params,
        "messages": messages,
    });
    Ok(sha256_hex(doc.to_string().as_bytes()))
}

/// Write-once reply cache: one JSON file per key under a directory.
#[derive(Debug, Clone)]
pub struct ReplyCache {
    dir: Option<PathBuf>,
}

impl ReplyCache {
    /// Opens (and creates) `dir`. If it cannot be written the cache is
    /// disabled with a warning.
    pub fn open(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let probe = dir.join(format!(".probe-{}", std::process::id()));
        let writable = fs::create_dir_all(dir)
            .and_then(|_| fs::write(&probe, b""))
            .and_then(|_| fs::remove_file(&probe));
        match writable {
            Ok(()) => Self {
                dir: Some(dir.to_path_buf()),
            },
            Err(e) => {
                tracing::warn!(
                    "reply cache disabled, {} is not writable: {e}",
                    dir.display()
                );
                Self::disabled()
            }
        }
    }

    pub fn disabled() -> Self {
        Self { dir: None }
    }

    pub fn is_enabled(&self) -> bool {
        self.dir.is_some()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    pub fn lookup(&self, key: &str) -> Option<ModelReply> {
        let start = Instant::now();
        let text = fs::read_to_string(self.path(key)?).ok()?;
        let mut reply: ModelReply = serde_json::from_str(&text).ok()?;
        reply.from_cache = true;
        reply.latency_ms = start.elapsed().as_millis() as u64;
        Some(reply)
    }

    /// Stores `reply` unless the key already exists.
    pub fn store(&self, key: &str, reply: &ModelReply) {
        let (Some(dir), Some(path)) = (self.dir.as_ref(), self.path(key)) else {
            return;
        };
        if path.exists() {
            return;
        }
        let mut stored = reply.clone();
        stored.from_cache = false;
        let result = (|| -> std::io::Result<()> {
            let mut tmp = tempfile_in(dir)?;
            tmp.1
                .write_all(serde_json::to_string(&stored)?.as_bytes())?;
            tmp.1.sync_all()?;
            // hard_link never replaces an existing file, so the first writer wins
            match fs::hard_link(&tmp.0, &path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {}
                Err(e) => {
                    let _ = fs::remove_file(&tmp.0);
                    return Err(e);
                }
            }
            fs::remove_file(&tmp.0)
        })();
        if let Err(e) = result {
            tracing::warn!("failed to cache reply {key}: {e}");
        }
    }
}

fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, fs::File)> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    loop {
        let n = COUNTER.fetch_add(1, Ordering::Relaxed);
        let path = dir.join(format!(".tmp-{}-{n}", std::process::id()));
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(f) => return Ok((path, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
}
