//! Request/response logging keyed by request content hash, and a provider
//! that replays a log.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::provider::{ChatRequest, Provider, ProviderError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: String,
    pub provider: String,
    pub request_sha256: String,
    pub request: ChatRequest,
    pub response: std::result::Result<String, ProviderError>,
}

/// Append-only JSONL log shared by all workers.
#[derive(Debug)]
pub struct RequestLog {
    out: Mutex<BufWriter<File>>,
}

impl RequestLog {
    pub fn append_to(path: impl AsRef<Path>) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: Mutex::new(BufWriter::new(f)),
        })
    }

    pub fn record(&self, entry: &LogEntry) -> Result<()> {
        let mut out = self.out.lock().expect("log poisoned");
        serde_json::to_writer(&mut *out, entry)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<LogEntry>> {
        let mut entries = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        Ok(entries)
    }
}

/// Logs every call made through `inner`, failures included.
pub struct LoggedProvider {
    pub inner: Arc<dyn Provider>,
    pub log: Arc<RequestLog>,
    pub stage: String,
}

impl Provider for LoggedProvider {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn model(&self) -> &str {
        self.inner.model()
    }

    fn temperature(&self) -> f32 {
        self.inner.temperature()
    }

    fn complete(&self, req: &ChatRequest) -> std::result::Result<String, ProviderError> {
        let response = self.inner.complete(req);
        let entry = LogEntry {
            stage: self.stage.clone(),
            provider: self.inner.name(),
            request_sha256: req.content_hash(),
            request: req.clone(),
            response: response.clone(),
        };
        if let Err(e) = self.log.record(&entry) {
            log::error!("request log write failed: {e}");
        }
        response
    }
}

/// Answers from a log: the last successful response recorded for the same
/// request hash. Unknown requests fail without retry.
pub struct ReplayProvider {
    model: String,
    temperature: f32,
    responses: HashMap<String, String>,
}

impl ReplayProvider {
    pub fn new(entries: &[LogEntry], stage: &str) -> Self {
        let mut model = String::new();
        let mut temperature = 0.0;
        let mut responses = HashMap::new();
        for e in entries.iter().filter(|e| e.stage == stage) {
            model.clone_from(&e.request.model);
            temperature = e.request.temperature;
            if let Ok(text) = &e.response {
                responses.insert(e.request_sha256.clone(), text.clone());
            }
        }
        Self {
            model,
            temperature,
            responses,
        }
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Provider for ReplayProvider {
    fn name(&self) -> String {
        "replay".into()
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn temperature(&self) -> f32 {
        self.temperature
    }

    fn complete(&self, req: &ChatRequest) -> std::result::Result<String, ProviderError> {
        let hash = req.content_hash();
        self.responses
            .get(&hash)
            .cloned()
            .ok_or_else(|| ProviderError::Malformed(format!("request {hash} not in log")))
    }
}
