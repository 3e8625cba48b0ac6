//! Name → client/provider resolution.
//!
//! Offline stubs are always available. `remote:<model>` names talk to an
//! OpenAI-compatible endpoint configured through the environment.

use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{bail, Result};

use qcompare_core::chat::{ChatClient, ChatRequest, ClientError, FnClient};
use qcompare_core::corpus::text_digest;
use qcompare_core::remote::{Endpoint, RemoteChatClient, RemoteEmbeddingProvider};
use qcompare_core::simfilter::{EmbeddingProvider, HashBagProvider};

/// Chat clients known by name, with a one-line description.
pub const CLIENTS: [(&str, &str); 7] = [
    ("stub-merge", "text-only; returns a fixed-form comparison"),
    ("stub-first", "multi-image; always prefers the first image / option A"),
    ("stub-a", "multi-image; answers \"A\""),
    ("stub-teacher", "multi-image; general comparisons and well-formed Q&A records"),
    ("stub-judge", "text-only; deterministic in-range judge scores"),
    ("stub-echo", "text-only; returns the prompt"),
    ("stub-fail", "always fails with a transport error"),
];

pub const PROVIDERS: [(&str, &str); 1] = [("hashbag", "offline hashed bag-of-words embedding")];

static COMPLETIONS: AtomicUsize = AtomicUsize::new(0);

/// Completions requested from registry-built clients since process start.
pub fn completion_count() -> usize {
    COMPLETIONS.load(Ordering::SeqCst)
}

struct Counted<C>(C);

impl<C: ChatClient> ChatClient for Counted<C> {
    fn name(&self) -> &str {
        self.0.name()
    }
    fn max_images(&self) -> usize {
        self.0.max_images()
    }
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        COMPLETIONS.fetch_add(1, Ordering::SeqCst);
        self.0.complete(request)
    }
}

fn prompt_text(req: &ChatRequest) -> String {
    req.turns.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join("\n")
}

fn digest_byte(req: &ChatRequest, i: usize) -> u8 {
    let d = text_digest(&prompt_text(req));
    u8::from_str_radix(&d[2 * i..2 * i + 2], 16).unwrap_or(0)
}

fn stub_merge(req: &ChatRequest) -> Result<String, ClientError> {
    let n = req.turns[0].text.matches(" image: ").count().max(2);
    let best = ["first", "second", "third", "fourth"][digest_byte(req, 0) as usize % n];
    Ok(format!(
        "The {best} image has the best quality: it is the sharpest and shows the least noise, while the others are softer."
    ))
}

fn stub_teacher(req: &ChatRequest) -> Result<String, ClientError> {
    let text = prompt_text(req);
    if text.contains("CORRECT:") {
        return Ok("Q: Which image is the sharpest?\nCORRECT: The first image\nWRONG: The second image\nASPECT: sharpness\n\n\
Q: Is the lighting of the first image better than the second?\nCORRECT: Yes\nWRONG: No\nASPECT: lighting\n"
            .to_string());
    }
    stub_merge(req)
}

fn stub_judge(req: &ChatRequest) -> Result<String, ClientError> {
    let s: Vec<String> = (0..3).map(|i| (digest_byte(req, i) % 3).to_string()).collect();
    Ok(s.join(" "))
}

pub fn client_names() -> Vec<&'static str> {
    CLIENTS.iter().map(|(n, _)| *n).collect()
}

/// Checks that `name` resolves without building anything.
pub fn check_client(name: &str) -> Result<()> {
    if client_names().contains(&name) || remote_model(name).is_some() {
        Ok(())
    } else {
        bail!("unknown client `{name}`; known: {}, remote:<model>", client_names().join(", "))
    }
}

pub fn check_provider(name: &str) -> Result<()> {
    if name == "hashbag" || remote_model(name).is_some() {
        Ok(())
    } else {
        bail!("unknown provider `{name}`; known: hashbag, remote:<model>")
    }
}

fn remote_model(name: &str) -> Option<&str> {
    name.strip_prefix("remote:").filter(|m| !m.is_empty())
}

/// `max_images` only applies to remote clients; stubs have fixed
/// capabilities.
pub fn build_client(name: &str, max_images: usize) -> Result<Box<dyn ChatClient>> {
    check_client(name)?;
    if let Some(model) = remote_model(name) {
        return Ok(Box::new(Counted(RemoteChatClient::new(model, max_images, Endpoint::from_env()))));
    }
    let c: Box<dyn ChatClient> = match name {
        "stub-merge" => Box::new(Counted(FnClient::new(name, 0, stub_merge))),
        "stub-first" => Box::new(Counted(FnClient::new(name, 4, |_: &ChatRequest| {
            Ok("(A) The first image.".to_string())
        }))),
        "stub-a" => Box::new(Counted(FnClient::new(name, 4, |_: &ChatRequest| Ok("A".to_string())))),
        "stub-teacher" => Box::new(Counted(FnClient::new(name, 4, stub_teacher))),
        "stub-judge" => Box::new(Counted(FnClient::new(name, 0, stub_judge))),
        "stub-echo" => Box::new(Counted(FnClient::new(name, 0, |r: &ChatRequest| Ok(prompt_text(r))))),
        "stub-fail" => Box::new(Counted(FnClient::new(name, 4, |_: &ChatRequest| {
            Err(ClientError::Transport("stub failure".into()))
        }))),
        _ => unreachable!("checked above"),
    };
    Ok(c)
}

pub fn build_provider(name: &str, dim: usize) -> Result<Box<dyn EmbeddingProvider>> {
    check_provider(name)?;
    if let Some(model) = remote_model(name) {
        return Ok(Box::new(RemoteEmbeddingProvider::new(model, dim, Endpoint::from_env())));
    }
    if dim < 2 {
        bail!("embed_dim must be at least 2");
    }
    Ok(Box::new(HashBagProvider::new(dim)))
}
