//! Remote text-completion and embedding provider.
//!
//! The wire format is a chat-completions style POST of
//! `{model, temperature, messages: [{role, content}]}`. Transports are
//! pluggable so tests can script replies without a network.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    /// Name of the environment variable holding the API key. The key itself is
    /// never stored in config files.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// Base delay of the exponential backoff, before jitter.
    pub backoff_ms: u64,
    pub embedding_endpoint: Option<String>,
    pub embedding_model: Option<String>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "tool-agent".into(),
            temperature: 0.0,
            api_key_env: Some("AGENTREC_API_KEY".into()),
            timeout_secs: 60,
            max_retries: 3,
            max_in_flight: 4,
            backoff_ms: 250,
            embedding_endpoint: None,
            embedding_model: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("environment variable `{0}` with the API key is not set")]
    MissingApiKey(String),
    #[error("request timed out")]
    Timeout,
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("could not decode provider response: {0}")]
    Decode(String),
    #[error("provider reply rejected: {0}")]
    InvalidReply(String),
    #[error("{0} is not supported by this transport")]
    Unsupported(&'static str),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<ProviderError> },
}

impl ProviderError {
    /// Timeouts, connection failures, 429 and 5xx are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Timeout | ProviderError::Transport(_) => true,
            ProviderError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub model: String,
    pub input: Vec<String>,
}

/// One round trip to the provider. Implementations do not retry.
pub trait ChatTransport: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError>;

    fn embed(&self, _request: &EmbedRequest) -> Result<Vec<Vec<f64>>, ProviderError> {
        Err(ProviderError::Unsupported("embeddings"))
    }
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    embedding_endpoint: Option<String>,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

impl HttpTransport {
    pub fn new(config: &ProviderConfig) -> Result<Self, ProviderError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ProviderError::MissingApiKey(var.clone()))?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(HttpTransport {
            client,
            endpoint: config.endpoint.clone(),
            embedding_endpoint: config.embedding_endpoint.clone(),
            api_key,
        })
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, url: &str, body: &B) -> Result<R, ProviderError> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(map_reqwest)?;
        let status = resp.status();
        let text = resp.text().map_err(map_reqwest)?;
        if !status.is_success() {
            return Err(ProviderError::Http {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::Decode(e.to_string()))
    }
}

fn map_reqwest(e: reqwest::Error) -> ProviderError {
    if e.is_timeout() {
        ProviderError::Timeout
    } else {
        ProviderError::Transport(e.to_string())
    }
}

impl ChatTransport for HttpTransport {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let resp: ChatResponse = self.post(&self.endpoint, request)?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ProviderError::Decode("response has no choices".into()))
    }

    fn embed(&self, request: &EmbedRequest) -> Result<Vec<Vec<f64>>, ProviderError> {
        let url = self.embedding_endpoint.as_ref().ok_or(ProviderError::Unsupported("embeddings without endpoint"))?;
        let resp: EmbedResponse = self.post(url, request)?;
        Ok(resp.data.into_iter().map(|d| d.embedding).collect())
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap_or_else(|p| p.into_inner());
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap_or_else(|p| p.into_inner());
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|p| p.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

/// Transport plus retry policy and in-flight cap. Cheap to clone.
#[derive(Clone)]
pub struct ProviderClient {
    config: ProviderConfig,
    transport: Arc<dyn ChatTransport>,
    in_flight: Arc<InFlight>,
}

impl ProviderClient {
    pub fn new(config: ProviderConfig, transport: Arc<dyn ChatTransport>) -> Self {
        let cap = config.max_in_flight.max(1);
        ProviderClient {
            config,
            transport,
            in_flight: Arc::new(InFlight {
                cap,
                used: Mutex::new(0),
                freed: Condvar::new(),
            }),
        }
    }

    /// Client over [`HttpTransport`].
    pub fn http(config: ProviderConfig) -> Result<Self, ProviderError> {
        let transport = HttpTransport::new(&config)?;
        Ok(Self::new(config, Arc::new(transport)))
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let attempts = self.config.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.in_flight.acquire();
                call()
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    let base = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(10));
                    let jitter = if base > 0 { rand::rng().random_range(0..=base / 2) } else { 0 };
                    log::warn!("provider attempt {attempt}/{attempts} failed: {e}; retrying");
                    std::thread::sleep(Duration::from_millis(base + jitter));
                }
                Err(e) if attempt > 1 => {
                    return Err(ProviderError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn chat(&self, messages: Vec<ChatMessage>) -> Result<String, ProviderError> {
        let request = ChatRequest {
            model: self.config.model.clone(),
            temperature: self.config.temperature,
            messages,
        };
        self.with_retries(|| self.transport.chat(&request))
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let request = EmbedRequest {
            model: self.config.embedding_model.clone().unwrap_or_else(|| self.config.model.clone()),
            input: texts.to_vec(),
        };
        let out = self.with_retries(|| self.transport.embed(&request))?;
        if out.len() != texts.len() {
            return Err(ProviderError::Decode(format!("{} embeddings for {} inputs", out.len(), texts.len())));
        }
        Ok(out)
    }
}

/// Scripted transport for tests and offline demos: replies are returned in order,
/// and every request is recorded.
#[derive(Default)]
pub struct ScriptedTransport {
    replies: Mutex<std::collections::VecDeque<Result<String, ProviderError>>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedTransport {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedTransport {
            replies: Mutex::new(replies.into_iter().map(|s| Ok(s.into())).collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn push(&self, reply: Result<String, ProviderError>) {
        self.replies.lock().unwrap().push_back(reply);
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl ChatTransport for ScriptedTransport {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        self.requests.lock().unwrap().push(request.clone());
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(ProviderError::Transport("script exhausted".into())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ProviderConfig {
        ProviderConfig {
            backoff_ms: 0,
            max_retries: 2,
            api_key_env: None,
            ..ProviderConfig::default()
        }
    }

    #[test]
    fn retries_transient_errors_then_succeeds() {
        let t = Arc::new(ScriptedTransport::default());
        t.push(Err(ProviderError::Timeout));
        t.push(Err(ProviderError::Http { status: 503, body: String::new() }));
        t.push(Ok("fine".into()));
        let client = ProviderClient::new(quick(), t.clone());
        assert_eq!(client.chat(vec![ChatMessage::user("hi")]).unwrap(), "fine");
        assert_eq!(t.requests().len(), 3);
        assert_eq!(t.requests()[0].temperature, 0.0);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let t = Arc::new(ScriptedTransport::default());
        for _ in 0..5 {
            t.push(Err(ProviderError::Timeout));
        }
        let client = ProviderClient::new(quick(), t.clone());
        let err = client.chat(vec![]).unwrap_err();
        assert!(matches!(err, ProviderError::Exhausted { attempts: 3, .. }), "{err}");
    }

    #[test]
    fn client_errors_are_not_retried() {
        let t = Arc::new(ScriptedTransport::default());
        t.push(Err(ProviderError::Http { status: 400, body: "bad".into() }));
        t.push(Ok("unused".into()));
        let client = ProviderClient::new(quick(), t.clone());
        assert!(matches!(client.chat(vec![]), Err(ProviderError::Http { status: 400, .. })));
        assert_eq!(t.requests().len(), 1);
    }

    #[test]
    fn missing_key_is_reported() {
        let cfg = ProviderConfig {
            api_key_env: Some("AGENTREC_TEST_KEY_THAT_IS_NOT_SET".into()),
            ..ProviderConfig::default()
        };
        assert!(matches!(HttpTransport::new(&cfg), Err(ProviderError::MissingApiKey(_))));
    }
}
