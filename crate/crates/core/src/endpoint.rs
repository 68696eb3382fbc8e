//! Blocking JSON-over-HTTP client shared by the retriever, reranker,
//! generator and extractor backends.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EndpointError {
    #[error("request to {url} failed after {attempts} attempt(s): {message}")]
    Exhausted {
        url: String,
        attempts: u32,
        message: String,
    },
    #[error("request to {url} rejected with status {status}: {body}")]
    Rejected { url: String, status: u16, body: String },
    #[error("invalid response from {url}: {message}")]
    InvalidResponse { url: String, message: String },
    #[error("could not build http client: {0}")]
    Client(String),
}

impl EndpointError {
    /// Number of attempts made before giving up (1 for non-retryable failures).
    pub fn attempts(&self) -> u32 {
        match self {
            EndpointError::Exhausted { attempts, .. } => *attempts,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    200
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout_ms: default_timeout_ms(),
            max_attempts: default_attempts(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

/// A JSON POST client. `reqwest::blocking::Client` is internally pooled and
/// may be shared across threads, so concurrent in-flight requests are fine.
#[derive(Debug, Clone)]
pub struct JsonClient {
    cfg: EndpointConfig,
    http: reqwest::blocking::Client,
}

impl JsonClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, EndpointError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| EndpointError::Client(e.to_string()))?;
        Ok(Self { cfg, http })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    /// POSTs `body` and decodes the JSON reply. Transport errors, timeouts and
    /// 5xx/429 replies are retried with linear backoff up to `max_attempts`.
    pub fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        body: &Req,
    ) -> Result<Resp, EndpointError> {
        let url = &self.cfg.base_url;
        let attempts = self.cfg.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.http.post(url).json(body).send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<Resp>().map_err(|e| EndpointError::InvalidResponse {
                            url: url.clone(),
                            message: e.to_string(),
                        });
                    }
                    let code = status.as_u16();
                    let text = resp.text().unwrap_or_default();
                    if !(status.is_server_error() || code == 429) {
                        return Err(EndpointError::Rejected {
                            url: url.clone(),
                            status: code,
                            body: text,
                        });
                    }
                    last = format!("status {code}: {text}");
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < attempts {
                log::warn!("{url}: attempt {attempt}/{attempts} failed: {last}");
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms * attempt as u64));
            }
        }
        Err(EndpointError::Exhausted {
            url: url.clone(),
            attempts,
            message: last,
        })
    }
}

/// External tokenizer: request `{text}`, response `{count}`.
///
/// [`Tokenizer::count`] cannot fail, so the first endpoint error is stored
/// and the call returns 0; callers check [`EndpointTokenizer::take_error`].
#[derive(Debug)]
pub struct EndpointTokenizer {
    client: JsonClient,
    error: std::sync::Mutex<Option<EndpointError>>,
}

#[derive(Serialize)]
struct CountRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct CountResponse {
    count: usize,
}

impl EndpointTokenizer {
    pub fn new(cfg: EndpointConfig) -> Result<Self, EndpointError> {
        Ok(Self { client: JsonClient::new(cfg)?, error: Default::default() })
    }

    pub fn try_count(&self, text: &str) -> Result<usize, EndpointError> {
        self.client.post::<_, CountResponse>(&CountRequest { text }).map(|r| r.count)
    }

    pub fn take_error(&self) -> Option<EndpointError> {
        self.error.lock().expect("tokenizer error lock").take()
    }
}

impl crate::text::Tokenizer for EndpointTokenizer {
    fn count(&self, text: &str) -> usize {
        if text.trim().is_empty() {
            return 0;
        }
        self.try_count(text).unwrap_or_else(|e| {
            self.error.lock().expect("tokenizer error lock").get_or_insert(e);
            0
        })
    }
}
