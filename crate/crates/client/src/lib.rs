//! Async client for the review service.

use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use qcompare_core::evalkit::McqRecord;
use qcompare_core::review::{
    CorrectnessReport, CrossExamTask, Resolution, ResolveRequest, ReviewPayload, ReviewTask, ReviewVerdict,
    SubmitOutcome, VerdictSubmission,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{status} {kind}: {message}")]
    Service {
        status: u16,
        kind: String,
        message: String,
    },
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            Self::Service { status, .. } => Some(*status),
            Self::Transport(e) => e.status().map(|s| s.as_u16()),
        }
    }

    pub fn is_conflict(&self) -> bool {
        self.status() == Some(StatusCode::CONFLICT.as_u16())
    }

    pub fn is_not_found(&self) -> bool {
        self.status() == Some(StatusCode::NOT_FOUND.as_u16())
    }
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
    message: String,
}

#[derive(Serialize)]
struct CreateBatch<'a> {
    batch: &'a str,
    kept: &'a [ReviewPayload],
    removed: &'a [ReviewPayload],
    k: usize,
    seed: u64,
}

#[derive(Deserialize)]
struct Created {
    created: usize,
}

#[derive(Deserialize)]
struct VerdictAck {
    outcome: SubmitOutcome,
}

#[derive(Clone)]
pub struct ReviewClient {
    base: String,
    http: reqwest::Client,
}

impl ReviewClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base: base_url.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn call<B: Serialize + ?Sized, T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        query: &[(&str, &str)],
        body: Option<&B>,
    ) -> Result<T, ClientError> {
        let mut req = self.http.request(method, format!("{}{path}", self.base)).query(query);
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let (kind, message) = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => (b.error, b.message),
            Err(_) => ("http".to_string(), text),
        };
        Err(ClientError::Service {
            status: status.as_u16(),
            kind,
            message,
        })
    }

    pub async fn health(&self) -> Result<(), ClientError> {
        let resp = self.http.get(format!("{}/healthz", self.base)).send().await?;
        resp.error_for_status()?;
        Ok(())
    }

    pub async fn batches(&self) -> Result<Vec<String>, ClientError> {
        self.call::<(), _>(Method::GET, "/batches", &[], None).await
    }

    pub async fn create_batch(
        &self,
        batch: &str,
        kept: &[ReviewPayload],
        removed: &[ReviewPayload],
        k: usize,
        seed: u64,
    ) -> Result<usize, ClientError> {
        let body = CreateBatch {
            batch,
            kept,
            removed,
            k,
            seed,
        };
        let c: Created = self.call(Method::POST, "/batches", &[], Some(&body)).await?;
        Ok(c.created)
    }

    pub async fn tasks(&self, batch: &str) -> Result<Vec<ReviewTask>, ClientError> {
        self.call::<(), _>(Method::GET, "/tasks", &[("batch", batch)], None).await
    }

    pub async fn submit_verdict(&self, task_id: &str, reviewer_id: &str, correct: bool) -> Result<SubmitOutcome, ClientError> {
        let body = VerdictSubmission {
            task_id: task_id.to_string(),
            reviewer_id: reviewer_id.to_string(),
            correct,
            timestamp: None,
        };
        let ack: VerdictAck = self.call(Method::POST, "/verdicts", &[], Some(&body)).await?;
        Ok(ack.outcome)
    }

    pub async fn verdicts(&self, batch: &str, reviewer: Option<&str>) -> Result<Vec<ReviewVerdict>, ClientError> {
        let mut q = vec![("batch", batch)];
        if let Some(r) = reviewer {
            q.push(("reviewer", r));
        }
        self.call::<(), _>(Method::GET, "/verdicts", &q, None).await
    }

    pub async fn report(&self, batch: &str) -> Result<CorrectnessReport, ClientError> {
        self.call::<(), _>(Method::GET, "/report", &[("batch", batch)], None).await
    }

    pub async fn create_crossexam(&self, records: &[McqRecord]) -> Result<usize, ClientError> {
        let c: Created = self.call(Method::POST, "/crossexam", &[], Some(records)).await?;
        Ok(c.created)
    }

    pub async fn pending(&self) -> Result<Vec<CrossExamTask>, ClientError> {
        self.call::<(), _>(Method::GET, "/crossexam/pending", &[], None).await
    }

    pub async fn resolve(
        &self,
        task_id: &str,
        resolution: Resolution,
        reviewer_id: Option<&str>,
    ) -> Result<CrossExamTask, ClientError> {
        let body = ResolveRequest {
            resolution,
            reviewer_id: reviewer_id.map(str::to_string),
        };
        let path = format!("/crossexam/{}/resolve", encode_segment(task_id));
        self.call(Method::POST, &path, &[], Some(&body)).await
    }
}

/// Percent-encodes everything outside the unreserved set.
fn encode_segment(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}
