use std::time::Duration;

use serde_json::{json, Value};

use super::{Completion, LlmProvider, LlmUsage, ProviderError};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpSettings {
    /// Endpoint root, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub key_env: String,
    /// Total attempts per request, including the first.
    pub attempts: u32,
    /// First retry delay; doubles on each further retry.
    pub backoff: Duration,
    pub timeout: Duration,
}

impl HttpSettings {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, key_env: impl Into<String>) -> Self {
        HttpSettings {
            base_url: base_url.into(),
            model: model.into(),
            key_env: key_env.into(),
            attempts: 3,
            backoff: Duration::from_secs(1),
            timeout: Duration::from_secs(60),
        }
    }

    pub(crate) fn read_key(&self) -> Result<String, ProviderError> {
        match std::env::var(&self.key_env) {
            Ok(k) if !k.trim().is_empty() => Ok(k),
            _ => Err(ProviderError::MissingKey(self.key_env.clone())),
        }
    }
}

fn retryable(e: &ProviderError) -> bool {
    match e {
        ProviderError::HttpError(s) => *s == 429 || *s >= 500,
        ProviderError::Timeout | ProviderError::Transport(_) => true,
        _ => false,
    }
}

fn post_once(agent: &ureq::Agent, url: &str, key: &str, body: &Value) -> Result<Value, ProviderError> {
    let result = agent.post(url).header("Authorization", &format!("Bearer {key}")).send_json(body);
    let mut resp = match result {
        Ok(r) => r,
        Err(ureq::Error::Timeout(_)) => return Err(ProviderError::Timeout),
        Err(ureq::Error::StatusCode(s)) => return Err(ProviderError::HttpError(s)),
        Err(e) => return Err(ProviderError::Transport(e.to_string())),
    };
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        return Err(ProviderError::HttpError(status));
    }
    resp.body_mut().read_json::<Value>().map_err(|e| match e {
        ureq::Error::Timeout(_) => ProviderError::Timeout,
        other => ProviderError::MalformedResponse(other.to_string()),
    })
}

/// POSTs JSON to `{base_url}/{endpoint}` with retries on 429, 5xx, timeouts
/// and transport failures.
pub(crate) fn post_json(settings: &HttpSettings, key: &str, endpoint: &str, body: &Value) -> Result<Value, ProviderError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(settings.timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let url = format!("{}/{endpoint}", settings.base_url.trim_end_matches('/'));
    let mut delay = settings.backoff;
    let attempts = settings.attempts.max(1);
    let mut attempt = 1;
    loop {
        match post_once(&agent, &url, key, body) {
            Err(e) if attempt < attempts && retryable(&e) => {
                log::warn!("request to {url} failed ({e}); retry {attempt} in {delay:?}");
                std::thread::sleep(delay);
                delay *= 2;
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// OpenAI-compatible chat-completions client.
#[derive(Debug, Clone)]
pub struct HttpLlm {
    settings: HttpSettings,
    key: String,
}

impl HttpLlm {
    /// Reads the API key from `settings.key_env`; fails before any network
    /// traffic when it is unset.
    pub fn from_env(settings: HttpSettings) -> Result<Self, ProviderError> {
        let key = settings.read_key()?;
        Ok(HttpLlm { settings, key })
    }

    pub fn with_key(settings: HttpSettings, key: impl Into<String>) -> Self {
        HttpLlm { settings, key: key.into() }
    }
}

impl LlmProvider for HttpLlm {
    fn complete(&self, prompt: &str, temperature: f64) -> Result<Completion, ProviderError> {
        let body = json!({
            "model": self.settings.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": temperature,
        });
        let reply = post_json(&self.settings, &self.key, "chat/completions", &body)?;
        let text = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::MalformedResponse("missing choices[0].message.content".into()))?
            .to_string();
        let reported = |k: &str| reply.pointer(&format!("/usage/{k}")).and_then(Value::as_u64);
        let usage = match (reported("prompt_tokens"), reported("completion_tokens")) {
            (Some(p), Some(c)) => LlmUsage { prompt_tokens: p, completion_tokens: c, provider_reported: true },
            _ => LlmUsage::approximate(prompt, &text),
        };
        Ok(Completion { text, usage })
    }
}
