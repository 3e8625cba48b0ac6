//! Chat-model client abstraction shared by the teacher pipelines and the
//! evaluators, plus retry and response-cache wrappers.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{read_jsonl, text_digest, ImageRef};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("client `{client}` accepts at most {max} images, request has {got}")]
    TooManyImages {
        client: String,
        max: usize,
        got: usize,
    },
    #[error("empty response")]
    EmptyResponse,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl ClientError {
    /// Capability errors are deterministic and not worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::TooManyImages { .. } => false,
            Self::Status { status, .. } => *status == 429 || *status >= 500,
            _ => true,
        }
    }
}

/// One user turn. Image slots appear in `text` as literal `<img_k>`
/// placeholders; `images[k]` is what slot `k` refers to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageRef>,
}

impl Turn {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn with_images(text: impl Into<String>, images: Vec<ImageRef>) -> Self {
        Self {
            text: text.into(),
            images,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub turns: Vec<Turn>,
}

impl ChatRequest {
    pub fn user(turn: Turn) -> Self {
        Self {
            system: None,
            turns: vec![turn],
        }
    }

    pub fn image_count(&self) -> usize {
        self.turns.iter().map(|t| t.images.len()).sum()
    }

    /// Digest of everything that determines the model's answer.
    pub fn digest(&self) -> String {
        text_digest(&serde_json::to_string(self).expect("request serializes"))
    }
}

pub trait ChatClient: Send + Sync {
    fn name(&self) -> &str;

    /// Largest number of images the client takes in one request; 0 for
    /// text-only models.
    fn max_images(&self) -> usize;

    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError>;
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn max_images(&self) -> usize {
        (**self).max_images()
    }
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        (**self).complete(request)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn max_images(&self) -> usize {
        (**self).max_images()
    }
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        (**self).complete(request)
    }
}

pub fn check_capability(client: &dyn ChatClient, request: &ChatRequest) -> Result<(), ClientError> {
    let got = request.image_count();
    if got > client.max_images() {
        return Err(ClientError::TooManyImages {
            client: client.name().to_string(),
            max: client.max_images(),
            got,
        });
    }
    Ok(())
}

/// Capability-checked call that treats blank output as a failure.
pub fn ask(client: &dyn ChatClient, request: &ChatRequest) -> Result<String, ClientError> {
    check_capability(client, request)?;
    let out = client.complete(request)?;
    if out.trim().is_empty() {
        return Err(ClientError::EmptyResponse);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: usize) -> Self {
        Self {
            attempts,
            base_delay: Duration::ZERO,
        }
    }

    fn delay(&self, attempt: usize) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt as u32)
    }
}

/// Retries retryable failures (including blank responses) with exponential
/// backoff.
pub struct RetryingClient<C> {
    inner: C,
    policy: RetryPolicy,
}

impl<C: ChatClient> RetryingClient<C> {
    pub fn new(inner: C, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: ChatClient> ChatClient for RetryingClient<C> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn max_images(&self) -> usize {
        self.inner.max_images()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let mut last = ClientError::EmptyResponse;
        for attempt in 0..self.policy.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.policy.delay(attempt - 1));
            }
            match ask(&self.inner, request) {
                Ok(out) => return Ok(out),
                Err(e) if e.is_retryable() => {
                    tracing::debug!(client = self.inner.name(), attempt, error = %e, "retrying");
                    last = e;
                }
                Err(e) => return Err(e),
            }
        }
        Err(last)
    }
}

#[derive(Serialize, Deserialize)]
struct CachedResponse {
    client: String,
    digest: String,
    response: String,
}

/// Response cache keyed by `(client name, request digest)`, optionally
/// backed by an append-only file. Only successful responses are stored.
pub struct CachedClient<C> {
    inner: C,
    entries: Mutex<HashMap<String, String>>,
    file: Option<PathBuf>,
    writer: Mutex<()>,
    misses: AtomicUsize,
}

impl<C: ChatClient> CachedClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            entries: Mutex::new(HashMap::new()),
            file: None,
            writer: Mutex::new(()),
            misses: AtomicUsize::new(0),
        }
    }

    /// Loads prior entries for this client from `path` and appends new
    /// ones to it.
    pub fn persistent(inner: C, path: &Path) -> Result<Self, crate::corpus::CorpusError> {
        let mut me = Self::new(inner);
        if path.exists() {
            let lines: Vec<CachedResponse> = read_jsonl(path)?;
            let entries = me.entries.get_mut().unwrap();
            for l in lines.into_iter().filter(|l| l.client == me.inner.name()) {
                entries.insert(l.digest, l.response);
            }
        }
        me.file = Some(path.to_path_buf());
        Ok(me)
    }

    /// Requests that reached the wrapped client.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(&self, digest: &str, response: &str) {
        let Some(path) = &self.file else { return };
        let _guard = self.writer.lock().unwrap();
        let line = CachedResponse {
            client: self.inner.name().to_string(),
            digest: digest.to_string(),
            response: response.to_string(),
        };
        let result = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| writeln!(f, "{}", serde_json::to_string(&line).unwrap()));
        if let Err(e) = result {
            tracing::warn!(path = %path.display(), error = %e, "response cache write failed");
        }
    }
}

impl<C: ChatClient> ChatClient for CachedClient<C> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn max_images(&self) -> usize {
        self.inner.max_images()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let digest = request.digest();
        if let Some(hit) = self.entries.lock().unwrap().get(&digest) {
            return Ok(hit.clone());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let out = self.inner.complete(request)?;
        if !out.trim().is_empty() {
            self.entries
                .lock()
                .unwrap()
                .insert(digest.clone(), out.clone());
            self.append(&digest, &out);
        }
        Ok(out)
    }
}

/// Client that answers with a closure; the basis of every offline stub.
pub struct FnClient<F> {
    name: String,
    max_images: usize,
    respond: F,
    calls: AtomicUsize,
}

impl<F> FnClient<F>
where
    F: Fn(&ChatRequest) -> Result<String, ClientError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, max_images: usize, respond: F) -> Self {
        Self {
            name: name.into(),
            max_images,
            respond,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<F> ChatClient for FnClient<F>
where
    F: Fn(&ChatRequest) -> Result<String, ClientError> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn max_images(&self) -> usize {
        self.max_images
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        check_capability(self, request)?;
        (self.respond)(request)
    }
}

/// A client that always returns the same text.
pub fn constant_client(
    name: &str,
    max_images: usize,
    reply: &str,
) -> FnClient<impl Fn(&ChatRequest) -> Result<String, ClientError> + Send + Sync> {
    let reply = reply.to_string();
    FnClient::new(name, max_images, move |_| Ok(reply.clone()))
}
