use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Something that turns a system and a user message into a completion.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String>;
}

impl<F> ChatBackend for F
where
    F: Fn(&str, &str) -> Result<String> + Send + Sync,
{
    fn complete(&self, system: &str, user: &str) -> Result<String> {
        self(system, user)
    }
}

pub const ENV_BASE_URL: &str = "EPITWIN_LLM_BASE_URL";
pub const ENV_MODEL: &str = "EPITWIN_LLM_MODEL";
pub const ENV_API_KEY: &str = "EPITWIN_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Sent as a bearer token. Prefer the environment variable.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub temperature: f64,
    pub max_tokens: usize,
    pub timeout_secs: u64,
    /// Extra attempts after a transport error, 429 or 5xx.
    pub retries: u32,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".to_string(),
            model: "default".to_string(),
            api_key: None,
            temperature: 0.0,
            max_tokens: 2048,
            timeout_secs: 120,
            retries: 2,
        }
    }
}

impl LlmConfig {
    /// Fills unset fields from `EPITWIN_LLM_*` environment variables.
    pub fn with_env(mut self) -> Self {
        if let Ok(v) = std::env::var(ENV_BASE_URL) {
            self.base_url = v;
        }
        if let Ok(v) = std::env::var(ENV_MODEL) {
            self.model = v;
        }
        if self.api_key.is_none() {
            self.api_key = std::env::var(ENV_API_KEY).ok();
        }
        self
    }
}

/// Client for an OpenAI-compatible chat-completions endpoint.
pub struct LlmClient {
    config: LlmConfig,
    agent: ureq::Agent,
}

impl LlmClient {
    pub fn new(config: LlmConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &Value) -> std::result::Result<String, (bool, String)> {
        let mut req = self.agent.post(&self.url()).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| (true, format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err((true, format!("HTTP {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err((false, format!("HTTP {status}: {}", text.chars().take(300).collect::<String>())));
        }
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| (false, format!("invalid response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| (false, "response has no choices[0].message.content".to_string()))
    }
}

impl ChatBackend for LlmClient {
    fn complete(&self, system: &str, user: &str) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 << (attempt - 1).min(5)));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((retry, msg)) => {
                    log::warn!("chat completion attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                    if !retry {
                        break;
                    }
                }
            }
        }
        Err(Error::Generator(last))
    }
}
