//! The transcript cache: durable record/replay of model exchanges.
//!
//! The cache is a line-delimited JSON file, one record per completed call,
//! keyed by the request digest. Appends happen as whole flushed lines, so a
//! crash can only ever produce a torn final line; loading detects torn or
//! tampered entries individually and keeps the rest.
//!
//! Replay is exact-match only. A request whose digest is absent is a cache
//! miss, never a near-miss substitution.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, Completion, CompletionRequest, ModelSpec};

/// One cached exchange.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CacheRecord {
    /// Digest of `request`; verified on load.
    pub request_hash: String,
    pub request: CompletionRequest,
    pub response: Completion,
    /// Unix milliseconds when the exchange was recorded.
    pub timestamp_ms: u64,
}

/// A problem found in one cache line during load. The surrounding entries
/// are unaffected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheIssue {
    /// 1-based line number in the cache file.
    pub line: usize,
    pub reason: String,
}

/// An in-memory index over a cache file, for replay.
#[derive(Debug, Default)]
pub struct TranscriptCache {
    entries: HashMap<String, Completion>,
}

impl TranscriptCache {
    /// Loads a cache file. Corrupt lines (torn JSON, digest mismatches)
    /// become [`CacheIssue`]s; later duplicates of a digest replace earlier
    /// ones, matching append order.
    pub fn load(path: &Path) -> Result<(Self, Vec<CacheIssue>), BackendError> {
        let file = File::open(path)?;
        let reader = BufReader::new(file);
        let mut entries = HashMap::new();
        let mut issues = Vec::new();
        for (index, line) in reader.lines().enumerate() {
            let line_no = index + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CacheRecord = match serde_json::from_str(&line) {
                Ok(record) => record,
                Err(err) => {
                    issues.push(CacheIssue {
                        line: line_no,
                        reason: format!("unreadable entry: {err}"),
                    });
                    continue;
                }
            };
            let actual = record.request.request_hash();
            if actual != record.request_hash {
                issues.push(CacheIssue {
                    line: line_no,
                    reason: format!(
                        "digest mismatch: entry claims {}, content hashes to {actual}",
                        record.request_hash
                    ),
                });
                continue;
            }
            entries.insert(record.request_hash, record.response);
        }
        Ok((TranscriptCache { entries }, issues))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, request_hash: &str) -> Option<&Completion> {
        self.entries.get(request_hash)
    }
}

/// Append handle for recording. Each record is written and flushed as one
/// line.
pub struct CacheAppender {
    path: PathBuf,
    file: Mutex<File>,
}

impl CacheAppender {
    /// Opens `path` for appending, creating it when absent.
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(CacheAppender { path: path.to_path_buf(), file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, request: &CompletionRequest, response: &Completion) -> Result<(), BackendError> {
        let record = CacheRecord {
            request_hash: request.request_hash(),
            request: request.clone(),
            response: response.clone(),
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| BackendError::MalformedResponse(format!("unserializable record: {e}")))?;
        let mut file = self.file.lock().unwrap();
        writeln!(file, "{line}")?;
        file.flush()?;
        Ok(())
    }
}

/// Passes requests through to an inner backend and records every successful
/// exchange.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    appender: Arc<CacheAppender>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>, appender: Arc<CacheAppender>) -> Self {
        RecordingBackend { inner, appender }
    }
}

#[async_trait]
impl Backend for RecordingBackend {
    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let response = self.inner.complete(request).await?;
        self.appender.append(request, &response)?;
        Ok(response)
    }

    fn spec(&self) -> &ModelSpec {
        self.inner.spec()
    }
}

/// Serves completions from a loaded cache. Never performs network IO; an
/// unknown request digest is a [`BackendError::CacheMiss`].
pub struct ReplayBackend {
    spec: ModelSpec,
    cache: Arc<TranscriptCache>,
}

impl ReplayBackend {
    pub fn new(spec: ModelSpec, cache: Arc<TranscriptCache>) -> Self {
        ReplayBackend { spec, cache }
    }
}

#[async_trait]
impl Backend for ReplayBackend {
    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let hash = request.request_hash();
        match self.cache.lookup(&hash) {
            Some(completion) => Ok(completion.clone()),
            None => Err(BackendError::CacheMiss { request_hash: hash }),
        }
    }

    fn spec(&self) -> &ModelSpec {
        &self.spec
    }
}

#[cfg(test)]
mod tests {
    use crate::backends::ScriptedBackend;
    use crate::domain::Role;

    use super::*;

    fn request(text: &str) -> CompletionRequest {
        CompletionRequest {
            model_name: "m".into(),
            system_prompt: "sys".into(),
            user_prompt: text.into(),
            temperature: 0.0,
            num_choices: 1,
            want_logprobs: false,
        }
    }

    async fn record_one(path: &Path, prompt: &str, reply: &str) -> Completion {
        let scripted = ScriptedBackend::new(ModelSpec::local("m", Role::Small));
        scripted.push_text(reply);
        let appender = Arc::new(CacheAppender::open(path).unwrap());
        let recording = RecordingBackend::new(Arc::new(scripted), appender);
        recording.complete(&request(prompt)).await.unwrap()
    }

    #[tokio::test]
    async fn record_then_replay_returns_the_identical_completion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let recorded = record_one(&path, "what is 2+2", "4").await;

        let (cache, issues) = TranscriptCache::load(&path).unwrap();
        assert!(issues.is_empty());
        let replay = ReplayBackend::new(ModelSpec::local("m", Role::Small), Arc::new(cache));
        let replayed = replay.complete(&request("what is 2+2")).await.unwrap();
        assert_eq!(replayed, recorded);
    }

    #[tokio::test]
    async fn one_changed_byte_is_a_cache_miss() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        record_one(&path, "prompt A", "reply").await;

        let (cache, _) = TranscriptCache::load(&path).unwrap();
        let replay = ReplayBackend::new(ModelSpec::local("m", Role::Small), Arc::new(cache));
        let err = replay.complete(&request("prompt B")).await.unwrap_err();
        assert!(matches!(err, BackendError::CacheMiss { .. }));
    }

    #[tokio::test]
    async fn torn_and_tampered_lines_do_not_poison_their_neighbors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        record_one(&path, "first", "one").await;
        record_one(&path, "second", "two").await;

        // Tamper: append a torn line and an entry whose digest lies.
        let mut raw = std::fs::read_to_string(&path).unwrap();
        let good_line = raw.lines().next().unwrap().to_string();
        let tampered = good_line.replacen("first", "FIRST", 1);
        raw.push_str("{\"request_hash\": \"abc\", \"trunca");
        raw.push('\n');
        raw.push_str(&tampered);
        raw.push('\n');
        std::fs::write(&path, raw).unwrap();

        let (cache, issues) = TranscriptCache::load(&path).unwrap();
        assert_eq!(cache.len(), 2, "both intact entries survive");
        assert_eq!(issues.len(), 2);
        assert!(issues[0].reason.contains("unreadable"));
        assert!(issues[1].reason.contains("digest mismatch"));
        assert!(cache.lookup(&request("first").request_hash()).is_some());
        assert!(cache.lookup(&request("second").request_hash()).is_some());
    }
}
