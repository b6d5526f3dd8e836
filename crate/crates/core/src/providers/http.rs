//! OpenAI- and Anthropic-style chat completion over HTTP.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, ProviderHandle, RequestShape, TransportError, TEMPERATURE};

const ANTHROPIC_VERSION: &str = "2023-06-01";
const ANTHROPIC_DEFAULT_MAX_TOKENS: u32 = 1024;

pub struct HttpBackend {
    agent: ureq::Agent,
    shape: RequestShape,
    endpoint: String,
    api_key: String,
    model: String,
    max_tokens: Option<u32>,
    system_prompt: Option<String>,
}

impl HttpBackend {
    pub fn new(handle: &ProviderHandle, endpoint: String, api_key: String) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(handle.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            agent,
            shape: handle.request_shape,
            endpoint,
            api_key,
            model: handle.model_id().to_string(),
            max_tokens: handle.max_tokens,
            system_prompt: handle.system_prompt.clone(),
        }
    }
}

pub fn request_body(
    shape: RequestShape,
    model: &str,
    prompt: &str,
    max_tokens: Option<u32>,
    system_prompt: Option<&str>,
) -> Value {
    match shape {
        RequestShape::AnthropicStyle => {
            let mut body = json!({
                "model": model,
                "max_tokens": max_tokens.unwrap_or(ANTHROPIC_DEFAULT_MAX_TOKENS),
                "temperature": TEMPERATURE,
                "messages": [{"role": "user", "content": prompt}],
            });
            if let Some(s) = system_prompt {
                body["system"] = json!(s);
            }
            body
        }
        _ => {
            let mut messages = Vec::new();
            if let Some(s) = system_prompt {
                messages.push(json!({"role": "system", "content": s}));
            }
            messages.push(json!({"role": "user", "content": prompt}));
            let mut body = json!({
                "model": model,
                "temperature": TEMPERATURE,
                "messages": messages,
            });
            if let Some(n) = max_tokens {
                body["max_tokens"] = json!(n);
            }
            body
        }
    }
}

pub fn extract_text(shape: RequestShape, body: &Value) -> Option<String> {
    match shape {
        RequestShape::AnthropicStyle => {
            let parts = body.get("content")?.as_array()?;
            let text: String = parts
                .iter()
                .filter(|p| p.get("type").and_then(Value::as_str) == Some("text"))
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect();
            if parts.is_empty() {
                None
            } else {
                Some(text)
            }
        }
        _ => body.pointer("/choices/0/message/content")?.as_str().map(str::to_string),
    }
}

fn is_transient_status(status: u16) -> bool {
    status == 408 || status == 409 || status == 429 || status >= 500
}

impl Backend for HttpBackend {
    fn send(&self, prompt: &str) -> Result<String, TransportError> {
        let body = request_body(self.shape, &self.model, prompt, self.max_tokens, self.system_prompt.as_deref());
        let req = self.agent.post(&self.endpoint).header("content-type", "application/json");
        let req = match self.shape {
            RequestShape::AnthropicStyle => {
                req.header("x-api-key", &self.api_key).header("anthropic-version", ANTHROPIC_VERSION)
            }
            _ => req.header("authorization", &format!("Bearer {}", self.api_key)),
        };
        let mut resp = req.send_json(&body).map_err(|e| TransportError::transient(format!("request failed: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::transient(format!("reading body failed: {e}")))?;
        if !(200..300).contains(&status) {
            let msg = format!("http status {status}: {}", text.chars().take(300).collect::<String>());
            return Err(if is_transient_status(status) {
                TransportError::transient(msg)
            } else {
                TransportError::permanent(msg)
            });
        }
        let json: Value =
            serde_json::from_str(&text).map_err(|e| TransportError::permanent(format!("response is not JSON: {e}")))?;
        extract_text(self.shape, &json)
            .ok_or_else(|| TransportError::permanent("response carries no completion text".to_string()))
    }
}
