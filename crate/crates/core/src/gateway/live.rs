//! HTTP provider for an OpenAI-compatible chat-completion aggregator.
//!
//! The API key is read from an environment variable at construction and
//! only ever sent as a bearer header; logged exchanges hold the request
//! body and the verbatim response body, never headers.

use async_trait::async_trait;
use serde_json::{json, Value};

use super::prompt::{render_case_prompt, SYSTEM_PROMPT};
use super::{Exchange, ProviderFailure, ProviderPort, ProviderReply, QueryContext, TransportFailure};
use crate::casemodel::ClinicalCase;
use crate::registry::ModelDescriptor;

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// e.g. `https://openrouter.ai/api/v1`; `/chat/completions` is appended.
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_response_bytes: usize,
    pub temperature: f64,
    /// Keep request/response bodies for the audit log.
    pub audit: bool,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            base_url: "https://openrouter.ai/api/v1".into(),
            api_key_env: "PLURALITY_API_KEY".into(),
            max_response_bytes: 256 * 1024,
            temperature: 0.2,
            audit: true,
        }
    }
}

pub struct LiveProvider {
    config: LiveConfig,
    api_key: Option<String>,
    client: reqwest::Client,
}

impl std::fmt::Debug for LiveProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiveProvider")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl LiveProvider {
    pub fn new(config: LiveConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: LiveConfig, api_key: Option<String>) -> Self {
        LiveProvider {
            config,
            api_key,
            client: reqwest::Client::new(),
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn request_body(&self, model: &ModelDescriptor, system: &str, user: &str) -> Value {
        let target = if model.endpoint_ref.is_empty() {
            &model.model_id
        } else {
            &model.endpoint_ref
        };
        json!({
            "model": target,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        })
    }
}

fn classify_send_error(e: &reqwest::Error) -> TransportFailure {
    if e.is_timeout() {
        TransportFailure::Timeout
    } else {
        TransportFailure::Network(e.to_string())
    }
}

fn classify_status(status: u16, body: &str) -> TransportFailure {
    let lower = body.to_lowercase();
    match status {
        413 => TransportFailure::Overflow(format!("HTTP {status}")),
        400 if lower.contains("context length") || lower.contains("context_length") || lower.contains("too many tokens") => {
            TransportFailure::Overflow(format!("HTTP {status}"))
        }
        408 | 429 | 500..=599 => TransportFailure::Network(format!("HTTP {status}")),
        _ => TransportFailure::Refusal(format!("HTTP {status}")),
    }
}

/// Extracts the assistant message from a chat-completion body.
fn completion_text(body: &str) -> Result<String, TransportFailure> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| TransportFailure::Refusal(format!("unreadable response body: {e}")))?;
    let choice = &v["choices"][0];
    match choice["finish_reason"].as_str() {
        Some("content_filter") => return Err(TransportFailure::Refusal("content filtered".into())),
        Some("length") => return Err(TransportFailure::Overflow("output truncated at token limit".into())),
        _ => {}
    }
    match choice["message"]["content"].as_str() {
        Some(text) => Ok(text.to_string()),
        None => {
            let detail = v["error"]["message"].as_str().unwrap_or("no message content");
            Err(TransportFailure::Refusal(detail.to_string()))
        }
    }
}

impl LiveProvider {
    /// One chat-completion round trip, classified.
    pub async fn chat(
        &self,
        model: &ModelDescriptor,
        system: &str,
        user: &str,
        ctx: QueryContext,
    ) -> Result<ProviderReply, ProviderFailure> {
        let body = self.request_body(model, system, user);
        let mut request = self.client.post(self.endpoint()).timeout(ctx.timeout).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let exchange = |response_body: String, http_status: Option<u16>| {
            self.config.audit.then(|| Exchange {
                model_id: model.model_id.clone(),
                attempt: ctx.attempt,
                request: body.clone(),
                response_body,
                http_status,
            })
        };
        let fail = |failure, ex| ProviderFailure {
            failure,
            exchange: ex,
            simulated_latency_ms: None,
        };

        let mut response = match request.send().await {
            Ok(r) => r,
            Err(e) => return Err(fail(classify_send_error(&e), exchange(String::new(), None))),
        };
        let status = response.status().as_u16();
        let cap = self.config.max_response_bytes;
        if response.content_length().is_some_and(|n| n as usize > cap) {
            return Err(fail(
                TransportFailure::Overflow(format!("declared body exceeds {cap} bytes")),
                exchange(String::new(), Some(status)),
            ));
        }
        let mut raw = Vec::new();
        loop {
            match response.chunk().await {
                Ok(Some(chunk)) => {
                    raw.extend_from_slice(&chunk);
                    if raw.len() > cap {
                        return Err(fail(
                            TransportFailure::Overflow(format!("body exceeds {cap} bytes")),
                            exchange(String::new(), Some(status)),
                        ));
                    }
                }
                Ok(None) => break,
                Err(e) => return Err(fail(classify_send_error(&e), exchange(String::new(), Some(status)))),
            }
        }
        let text = String::from_utf8_lossy(&raw).into_owned();
        if !(200..300).contains(&status) {
            return Err(fail(classify_status(status, &text), exchange(text, Some(status))));
        }
        match completion_text(&text) {
            Ok(content) => Ok(ProviderReply {
                text: content,
                simulated_latency_ms: None,
                exchange: exchange(text, Some(status)),
            }),
            Err(f) => Err(fail(f, exchange(text, Some(status)))),
        }
    }
}

#[async_trait]
impl ProviderPort for LiveProvider {
    async fn query(
        &self,
        model: &ModelDescriptor,
        case: &ClinicalCase,
        ctx: QueryContext,
    ) -> Result<ProviderReply, ProviderFailure> {
        self.chat(model, SYSTEM_PROMPT, &render_case_prompt(case), ctx).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_classification() {
        assert_eq!(classify_status(413, ""), TransportFailure::Overflow("HTTP 413".into()));
        assert!(matches!(classify_status(400, "maximum context length exceeded"), TransportFailure::Overflow(_)));
        assert!(matches!(classify_status(400, "bad"), TransportFailure::Refusal(_)));
        assert!(matches!(classify_status(503, ""), TransportFailure::Network(_)));
        assert!(matches!(classify_status(429, ""), TransportFailure::Network(_)));
        assert!(matches!(classify_status(401, ""), TransportFailure::Refusal(_)));
    }

    #[test]
    fn completion_parsing() {
        let ok = r#"{"choices":[{"message":{"content":"hello"},"finish_reason":"stop"}]}"#;
        assert_eq!(completion_text(ok).unwrap(), "hello");
        let filtered = r#"{"choices":[{"message":{"content":""},"finish_reason":"content_filter"}]}"#;
        assert!(matches!(completion_text(filtered), Err(TransportFailure::Refusal(_))));
        let cut = r#"{"choices":[{"message":{"content":"x"},"finish_reason":"length"}]}"#;
        assert!(matches!(completion_text(cut), Err(TransportFailure::Overflow(_))));
        assert!(matches!(completion_text("not json"), Err(TransportFailure::Refusal(_))));
    }

    #[test]
    fn debug_redacts_key() {
        let p = LiveProvider::with_key(LiveConfig::default(), Some("sk-secret".into()));
        assert!(!format!("{p:?}").contains("sk-secret"));
    }
}
