//! JSON-over-HTTP backend for chat-completion and embedding endpoints.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendConfig, ChatRequest, GatewayError, Result};

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    token_var: String,
    temperature: f64,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_seconds)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint: config.endpoint_url.trim_end_matches('/').to_string(),
            token_var: config.auth_token_env_var.clone(),
            temperature: config.temperature,
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        // Read on every call so the token only ever lives in the environment.
        let token =
            std::env::var(&self.token_var).map_err(|_| GatewayError::MissingCredential(self.token_var.clone()))?;
        let url = format!("{}/{path}", self.endpoint);
        let mut resp = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {token}"))
            .send_json(body)
            .map_err(|e| GatewayError::Transport {
                attempts: 1,
                message: e.to_string(),
            })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| GatewayError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        if !(200..300).contains(&status) {
            return Err(GatewayError::Http {
                status,
                body: text.chars().take(500).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::Parse(e.to_string()))
    }
}

impl Backend for HttpBackend {
    fn complete(&self, model_id: &str, request: &ChatRequest) -> Result<String> {
        let body = json!({
            "model": model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": if request.sample_index == 0 { 0.0 } else { self.temperature },
            "seed": request.sample_index,
        });
        let v = self.post("chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Parse("missing choices[0].message.content".into()))
    }

    fn embed(&self, model_id: &str, text: &str) -> Result<Vec<f64>> {
        let v = self.post("embeddings", &json!({"model": model_id, "input": text}))?;
        let arr = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Parse("missing data[0].embedding".into()))?;
        arr.iter()
            .map(|x| x.as_f64().ok_or_else(|| GatewayError::Parse("non-numeric embedding entry".into())))
            .collect()
    }
}
