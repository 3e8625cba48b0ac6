//! Chat-completions and embeddings clients for OpenAI-compatible HTTP
//! endpoints.
//!
//! Credentials come only from the environment: `QCOMPARE_API_KEY` and
//! optionally `QCOMPARE_API_BASE` (default `https://api.openai.com/v1`).

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::LazyLock;
use std::time::Duration;

use base64::Engine;
use regex::Regex;
use serde_json::{json, Value};

use crate::chat::{check_capability, ChatClient, ChatRequest, ClientError};
use crate::corpus::ImageRef;
use crate::simfilter::{normalize, EmbeddingProvider, ProviderError};

pub const API_KEY_VAR: &str = "QCOMPARE_API_KEY";
pub const API_BASE_VAR: &str = "QCOMPARE_API_BASE";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";

static HTTP_REQUESTS: AtomicUsize = AtomicUsize::new(0);

/// Number of HTTP requests issued by this module since process start.
pub fn http_request_count() -> usize {
    HTTP_REQUESTS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub base_url: String,
    pub api_key: Option<String>,
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
        }
    }

    pub fn from_env() -> Self {
        Self::new(
            std::env::var(API_BASE_VAR).unwrap_or_else(|_| DEFAULT_API_BASE.to_string()),
            std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()),
        )
    }

    fn post(&self, http: &reqwest::blocking::Client, path: &str, body: &Value) -> Result<Value, (Option<u16>, String)> {
        HTTP_REQUESTS.fetch_add(1, Ordering::SeqCst);
        let mut req = http.post(format!("{}/{path}", self.base_url)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| (None, e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| (None, e.to_string()))?;
        if !status.is_success() {
            return Err((Some(status.as_u16()), text.chars().take(500).collect()));
        }
        serde_json::from_str(&text).map_err(|e| (Some(status.as_u16()), format!("invalid json: {e}")))
    }
}

fn http_client(timeout: Duration) -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .expect("http client builds")
}

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<img_(\d+)>").unwrap());

fn image_url(image: &ImageRef) -> Result<String, ClientError> {
    let uri = image
        .uri
        .as_deref()
        .ok_or_else(|| ClientError::Malformed(format!("image `{}` has no uri", image.id)))?;
    if uri.starts_with("http://") || uri.starts_with("https://") || uri.starts_with("data:") {
        return Ok(uri.to_string());
    }
    let path = Path::new(uri.strip_prefix("file://").unwrap_or(uri));
    let bytes = std::fs::read(path).map_err(|e| ClientError::Transport(format!("reading {}: {e}", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/jpeg",
    };
    Ok(format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
}

/// Splits a turn at its `<img_k>` slots into interleaved text and image
/// content parts.
pub fn content_parts(text: &str, images: &[ImageRef]) -> Result<Vec<Value>, ClientError> {
    let mut parts = Vec::new();
    let mut last = 0;
    let push_text = |parts: &mut Vec<Value>, s: &str| {
        if !s.trim().is_empty() {
            parts.push(json!({"type": "text", "text": s}));
        }
    };
    for cap in SLOT.captures_iter(text) {
        let whole = cap.get(0).unwrap();
        let k: usize = cap[1].parse().map_err(|_| ClientError::Malformed(format!("bad slot {}", &cap[0])))?;
        let image = images
            .get(k)
            .ok_or_else(|| ClientError::Malformed(format!("slot <img_{k}> has no image")))?;
        push_text(&mut parts, &text[last..whole.start()]);
        parts.push(json!({"type": "image_url", "image_url": {"url": image_url(image)?}}));
        last = whole.end();
    }
    push_text(&mut parts, &text[last..]);
    Ok(parts)
}

pub struct RemoteChatClient {
    name: String,
    model: String,
    max_images: usize,
    endpoint: Endpoint,
    http: reqwest::blocking::Client,
    temperature: f64,
}

impl RemoteChatClient {
    pub fn new(model: impl Into<String>, max_images: usize, endpoint: Endpoint) -> Self {
        let model = model.into();
        Self {
            name: format!("remote:{model}"),
            model,
            max_images,
            endpoint,
            http: http_client(Duration::from_secs(120)),
            temperature: 0.0,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn request_body(&self, request: &ChatRequest) -> Result<Value, ClientError> {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        for turn in &request.turns {
            let content = if turn.images.is_empty() {
                Value::String(turn.text.clone())
            } else {
                Value::Array(content_parts(&turn.text, &turn.images)?)
            };
            messages.push(json!({"role": "user", "content": content}));
        }
        Ok(json!({"model": self.model, "messages": messages, "temperature": self.temperature}))
    }
}

impl ChatClient for RemoteChatClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn max_images(&self) -> usize {
        self.max_images
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        check_capability(self, request)?;
        let body = self.request_body(request)?;
        let v = self.endpoint.post(&self.http, "chat/completions", &body).map_err(|(status, msg)| match status {
            Some(status) if msg.starts_with("invalid json") => ClientError::Malformed(format!("{status}: {msg}")),
            Some(status) => ClientError::Status { status, body: msg },
            None => ClientError::Transport(msg),
        })?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ClientError::Malformed("missing choices[0].message.content".into()))
    }
}

pub struct RemoteEmbeddingProvider {
    name: String,
    model: String,
    dim: usize,
    endpoint: Endpoint,
    http: reqwest::blocking::Client,
}

impl RemoteEmbeddingProvider {
    pub fn new(model: impl Into<String>, dim: usize, endpoint: Endpoint) -> Self {
        let model = model.into();
        Self {
            name: format!("remote:{model}"),
            model,
            dim,
            endpoint,
            http: http_client(Duration::from_secs(60)),
        }
    }
}

/// Accepts `{"data": [{"embedding": [...]}, ...]}` or a bare list of vectors.
pub fn parse_embeddings(v: &Value) -> Result<Vec<Vec<f32>>, ProviderError> {
    let rows = match v {
        Value::Array(rows) => rows.iter().collect::<Vec<_>>(),
        Value::Object(_) => v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Shape("missing `data` array".into()))?
            .iter()
            .map(|d| d.get("embedding").ok_or_else(|| ProviderError::Shape("entry without `embedding`".into())))
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(ProviderError::Shape("expected an object or array".into())),
    };
    rows.into_iter()
        .map(|row| {
            row.as_array()
                .ok_or_else(|| ProviderError::Shape("embedding is not an array".into()))?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32).ok_or_else(|| ProviderError::Shape("non-numeric component".into())))
                .collect()
        })
        .collect()
}

impl EmbeddingProvider for RemoteEmbeddingProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let body = json!({"model": self.model, "input": texts});
        let v = self.endpoint.post(&self.http, "embeddings", &body).map_err(|(status, msg)| match status {
            Some(status) => ProviderError::Status { status, body: msg },
            None => ProviderError::Transport(msg),
        })?;
        let mut vectors = parse_embeddings(&v)?;
        if vectors.len() != texts.len() {
            return Err(ProviderError::Shape(format!("{} vectors for {} texts", vectors.len(), texts.len())));
        }
        for v in &mut vectors {
            if v.len() != self.dim {
                return Err(ProviderError::Shape(format!("dimension {} != {}", v.len(), self.dim)));
            }
            normalize(v);
        }
        Ok(vectors)
    }
}
