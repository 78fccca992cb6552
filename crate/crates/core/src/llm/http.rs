//! Chat-completion HTTP backend. Provider-agnostic request shape; credentials
//! come from an environment variable and are never written to config or logs.

use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{estimate_tokens, Backend, ChatRequest, ChatResponse, LlmError, TokenUsage};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub endpoint_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key; `None` for
    /// endpoints that need no authentication.
    pub api_key_env: Option<String>,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://localhost:8000/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: None,
            max_retries: 3,
            backoff_ms: 1000,
            timeout_secs: 120,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Failure(format!("http client: {e}")))?;
        Ok(Self { config, client })
    }

    fn api_key(&self) -> Result<Option<String>, LlmError> {
        match &self.config.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var).map(Some).map_err(|_| {
                LlmError::Failure(format!("environment variable {var} is not set"))
            }),
        }
    }

    /// One single-sample call with retry on transport errors, 429, and 5xx.
    fn call_once(&self, req: &ChatRequest, key: &Option<String>) -> Result<(String, TokenUsage), LlmError> {
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": req.user_text},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });

        let mut last_error = String::new();
        for attempt in 0..self.config.max_retries {
            if attempt > 0 {
                let delay = self.config.backoff_ms << (attempt - 1);
                std::thread::sleep(Duration::from_millis(delay));
            }
            let mut builder = self.client.post(&self.config.endpoint_url).json(&body);
            if let Some(key) = key {
                builder = builder.bearer_auth(key);
            }
            match builder.send() {
                Err(e) => last_error = format!("transport: {e}"),
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let parsed: CompletionBody = resp
                            .json()
                            .map_err(|e| LlmError::Failure(format!("bad response body: {e}")))?;
                        let content = parsed
                            .choices
                            .first()
                            .map(|c| c.message.content.clone())
                            .ok_or_else(|| LlmError::Failure("response has no choices".into()))?;
                        let usage = match parsed.usage {
                            Some(u) => TokenUsage {
                                input: u.prompt_tokens,
                                output: u.completion_tokens,
                            },
                            None => TokenUsage {
                                input: estimate_tokens(&req.system_text)
                                    + estimate_tokens(&req.user_text),
                                output: estimate_tokens(&content),
                            },
                        };
                        return Ok((content, usage));
                    }
                    if status.as_u16() == 429 || status.is_server_error() {
                        last_error = format!("status {status}");
                        continue;
                    }
                    return Err(LlmError::Failure(format!("status {status}")));
                }
            }
        }
        Err(LlmError::Failure(format!(
            "gave up after {} attempts: {last_error}",
            self.config.max_retries
        )))
    }
}

impl Backend for HttpBackend {
    /// Fans a multi-sample request out as n independent single-sample calls,
    /// which works against providers without native n-sampling.
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let key = self.api_key()?;
        let started = Instant::now();
        let mut samples = Vec::with_capacity(req.n_samples as usize);
        let mut usage = TokenUsage::default();
        for _ in 0..req.n_samples {
            let (content, call_usage) = self.call_once(req, &key)?;
            samples.push(content);
            usage.add(call_usage);
        }
        Ok(ChatResponse {
            samples,
            token_usage: usage,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}
