use serde::{Deserialize, Serialize};

use super::{Backend, ProviderError, ProviderRequest};

pub const API_KEY_ENV: &str = "TRUE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    60
}

/// OpenAI-style chat-completions client.
pub struct LiveBackend {
    config: LiveConfig,
    api_key: String,
    agent: ureq::Agent,
    name: String,
}

impl LiveBackend {
    /// Reads the API key from `TRUE_API_KEY`.
    pub fn from_env(config: LiveConfig) -> Result<Self, ProviderError> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| ProviderError::Config(format!("{API_KEY_ENV} is not set")))?;
        Ok(Self::new(config, key))
    }

    pub fn new(config: LiveConfig, api_key: String) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let name = format!("live:{}", config.model);
        LiveBackend { config, api_key, agent, name }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

impl Backend for LiveBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn call(&self, req: &ProviderRequest, _fp: &str, prompt: &str) -> Result<String, ProviderError> {
        let mut body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_output,
        });
        if let Some(seed) = req.seed {
            body["seed"] = seed.into();
        }
        let mut resp = self
            .agent
            .post(&self.endpoint())
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| ProviderError::Network { attempts: 1, message: e.to_string() })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Network { attempts: 1, message: e.to_string() })?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::Http { status, message: text.chars().take(200).collect() });
        }
        extract_content(&text)
    }
}

fn extract_content(body: &str) -> Result<String, ProviderError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| ProviderError::Http { status: 200, message: e.to_string() })?;
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(|s| s.to_string())
        .ok_or_else(|| ProviderError::Http { status: 200, message: "response has no message content".into() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_extraction() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"P: 0.8"}}]}"#;
        assert_eq!(extract_content(body).unwrap(), "P: 0.8");
        assert!(extract_content(r#"{"choices":[]}"#).is_err());
    }
}
