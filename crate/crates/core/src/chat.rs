//! Chat-completion backends.
//!
//! [`HttpBackend`] talks to any endpoint accepting the
//! `POST {base}/chat/completions` request shape. [`FixtureBackend`] replays
//! recorded responses from a directory so the pipeline runs offline.

use base64::Engine;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::time::Duration;
use thiserror::Error;

pub const ENV_BASE_URL: &str = "MRVG_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "MRVG_LLM_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected backend response: {0}")]
    Protocol(String),
    #[error("no fixture for `{key}` in {dir}")]
    MissingFixture { key: String, dir: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("environment variable {0} is not set")]
    MissingEnv(&'static str),
}

/// A system + user message pair; the user turn may carry one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPair {
    pub system: String,
    pub user: String,
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub prompt: PromptPair,
    /// JSON schema the answer should follow (sent as `response_format`).
    pub schema_name: String,
    pub schema: Value,
    /// Stable label used by replaying backends to find the recorded answer.
    pub key: String,
}

impl ChatRequest {
    /// Request body in the chat-completions wire format. Images are inlined
    /// as base64 data URLs.
    pub fn body(&self) -> Result<Value, BackendError> {
        let user_content = match &self.prompt.image {
            None => Value::String(self.prompt.user.clone()),
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|source| BackendError::Io {
                    path: path.clone(),
                    source,
                })?;
                let mime = match path.extension().and_then(|e| e.to_str()) {
                    Some("jpg") | Some("jpeg") => "image/jpeg",
                    _ => "image/png",
                };
                let data = base64::engine::general_purpose::STANDARD.encode(bytes);
                json!([
                    {"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{data}")}},
                    {"type": "text", "text": self.prompt.user},
                ])
            }
        };
        Ok(json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.prompt.system},
                {"role": "user", "content": user_content},
            ],
            "response_format": {
                "type": "json_schema",
                "json_schema": {"name": self.schema_name, "schema": self.schema},
            },
        }))
    }
}

/// Anything that turns a chat request into the assistant's text.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

pub struct HttpBackend {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            client,
        })
    }

    /// Configure from `MRVG_LLM_BASE_URL` and (optionally) `MRVG_LLM_API_KEY`.
    pub fn from_env() -> Result<Self, BackendError> {
        let base = std::env::var(ENV_BASE_URL).map_err(|_| BackendError::MissingEnv(ENV_BASE_URL))?;
        Self::new(base, std::env::var(ENV_API_KEY).ok())
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url)
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut req = self.client.post(self.endpoint()).json(&request.body()?);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))
    }
}

/// Replays `<dir>/<key>.json` verbatim for every request with that key.
pub struct FixtureBackend {
    dir: PathBuf,
}

impl FixtureBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn fixture_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }
}

impl ChatBackend for FixtureBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let path = self.fixture_path(&request.key);
        if !path.exists() {
            return Err(BackendError::MissingFixture {
                key: request.key.clone(),
                dir: self.dir.clone(),
            });
        }
        std::fs::read_to_string(&path).map_err(|source| BackendError::Io { path, source })
    }
}

/// Runs `f` over `items` with at most `max_inflight` calls in flight.
/// Results come back in input order.
pub fn bounded_map<T, R, F>(items: &[T], max_inflight: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let workers = max_inflight.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect()
}
