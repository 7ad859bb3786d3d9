//! HTTP adapters: an OpenAI-compatible chat-completions endpoint and a local
//! text-generation server (`POST /generate`).

use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendFailure, GenerationRequest, TextBackend};

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(timeout))
        .build()
        .into()
}

fn looks_like_refusal(body: &str) -> bool {
    body.contains("content_filter") || body.contains("content_policy")
}

/// Maps a non-2xx response to a failure. 408, 429 and 5xx are retryable.
fn status_failure(status: u16, body: String) -> BackendFailure {
    if looks_like_refusal(&body) {
        BackendFailure::Refusal { payload: body }
    } else if status == 408 || status == 429 || status >= 500 {
        BackendFailure::Transport(format!("HTTP {status}: {body}"))
    } else {
        BackendFailure::Rejected { status, body }
    }
}

fn post_json(agent: &ureq::Agent, url: &str, bearer: Option<&str>, body: &Value) -> Result<String, BackendFailure> {
    let mut req = agent.post(url);
    if let Some(key) = bearer {
        req = req.header("Authorization", format!("Bearer {key}"));
    }
    let mut resp = req
        .send_json(body)
        .map_err(|e| BackendFailure::Transport(e.to_string()))?;
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| BackendFailure::Transport(e.to_string()))?;
    if (200..300).contains(&status) {
        Ok(text)
    } else {
        Err(status_failure(status, text))
    }
}

/// Chat-completions client for OpenAI-compatible servers.
pub struct OpenAiChatBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiChatBackend {
    /// `base_url` is the API root, e.g. `https://api.openai.com/v1`.
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        OpenAiChatBackend {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            model: model.into(),
            api_key,
            agent: agent(Duration::from_secs(120)),
        }
    }

    /// Reads the API key from the environment variable `var`.
    pub fn from_env(base_url: impl Into<String>, model: impl Into<String>, var: &str) -> Result<Self, String> {
        let key = std::env::var(var).map_err(|_| format!("environment variable {var} is not set"))?;
        Ok(Self::new(base_url, model, Some(key)))
    }

    pub fn payload(&self, request: &GenerationRequest) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt.text}],
            "temperature": request.temperature,
            "max_tokens": request.max_new_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

pub(crate) fn parse_chat_response(raw: &str) -> Result<String, BackendFailure> {
    let v: Value = serde_json::from_str(raw)
        .map_err(|e| BackendFailure::Transport(format!("unreadable response: {e}")))?;
    let choice = &v["choices"][0];
    if choice.is_null() {
        return Err(BackendFailure::Transport(format!("response without choices: {raw}")));
    }
    let message = &choice["message"];
    if choice["finish_reason"] == "content_filter" || message["refusal"].is_string() {
        return Err(BackendFailure::Refusal { payload: raw.to_owned() });
    }
    Ok(message["content"].as_str().unwrap_or_default().to_owned())
}

impl TextBackend for OpenAiChatBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendFailure> {
        let url = format!("{}/chat/completions", self.base_url);
        let raw = post_json(&self.agent, &url, self.api_key.as_deref(), &self.payload(request))?;
        parse_chat_response(&raw)
    }
}

/// Client for a local text-generation server exposing `POST {base}/generate`
/// with `{"inputs", "parameters"}` and answering `{"generated_text"}`.
pub struct LocalServerBackend {
    base_url: String,
    agent: ureq::Agent,
}

impl LocalServerBackend {
    pub fn new(base_url: impl Into<String>) -> Self {
        LocalServerBackend {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            agent: agent(Duration::from_secs(300)),
        }
    }

    pub fn payload(request: &GenerationRequest) -> Value {
        let mut params = json!({
            "max_new_tokens": request.max_new_tokens,
            "do_sample": request.temperature > 0.0,
        });
        // These servers reject temperature 0; greedy is expressed by do_sample=false.
        if request.temperature > 0.0 {
            params["temperature"] = json!(request.temperature);
        }
        if let Some(seed) = request.seed {
            params["seed"] = json!(seed);
        }
        json!({ "inputs": request.prompt.text, "parameters": params })
    }
}

pub(crate) fn parse_generate_response(raw: &str) -> Result<String, BackendFailure> {
    let v: Value = serde_json::from_str(raw)
        .map_err(|e| BackendFailure::Transport(format!("unreadable response: {e}")))?;
    let obj = if v.is_array() { &v[0] } else { &v };
    match obj["generated_text"].as_str() {
        Some(t) => Ok(t.to_owned()),
        None if obj["error"].is_string() => Err(BackendFailure::Transport(raw.to_owned())),
        None => Err(BackendFailure::Transport(format!("response without generated_text: {raw}"))),
    }
}

impl TextBackend for LocalServerBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendFailure> {
        let url = format!("{}/generate", self.base_url);
        let raw = post_json(&self.agent, &url, None, &Self::payload(request))?;
        parse_generate_response(&raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_response_parsing() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"positive"},"finish_reason":"stop"}]}"#;
        assert_eq!(parse_chat_response(ok).unwrap(), "positive");
        let filtered = r#"{"choices":[{"message":{"content":null},"finish_reason":"content_filter"}]}"#;
        assert!(matches!(parse_chat_response(filtered), Err(BackendFailure::Refusal { payload }) if payload == filtered));
        let refusal = r#"{"choices":[{"message":{"content":null,"refusal":"I can't"},"finish_reason":"stop"}]}"#;
        assert!(matches!(parse_chat_response(refusal), Err(BackendFailure::Refusal { .. })));
        assert!(matches!(parse_chat_response("{}"), Err(BackendFailure::Transport(_))));
    }

    #[test]
    fn generate_response_parsing() {
        assert_eq!(parse_generate_response(r#"{"generated_text":"hi"}"#).unwrap(), "hi");
        assert_eq!(parse_generate_response(r#"[{"generated_text":"hi"}]"#).unwrap(), "hi");
        assert!(parse_generate_response(r#"{"error":"overloaded"}"#).is_err());
    }

    #[test]
    fn status_mapping() {
        assert!(matches!(status_failure(503, "busy".into()), BackendFailure::Transport(_)));
        assert!(matches!(status_failure(429, "slow down".into()), BackendFailure::Transport(_)));
        assert!(matches!(status_failure(401, "bad key".into()), BackendFailure::Rejected { status: 401, .. }));
        assert!(matches!(
            status_failure(400, r#"{"error":{"code":"content_filter"}}"#.into()),
            BackendFailure::Refusal { .. }
        ));
    }
}
