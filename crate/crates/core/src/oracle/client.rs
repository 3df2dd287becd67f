//! Blocking chat-completions client for an external region-selection model.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageMode {
    /// Send `file://<absolute path>`; the server must share the filesystem.
    Path,
    /// Inline the image as a `data:` URL.
    Base64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub path: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_parallel: usize,
    pub backoff_base_ms: u64,
    pub image_mode: ImageMode,
    /// Directory holding `<doc_id>.png` page images.
    pub image_dir: Option<PathBuf>,
    pub max_tokens: u32,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            path: "/v1/chat/completions".into(),
            model: "region-selector".into(),
            timeout_secs: 120.0,
            max_retries: 3,
            max_parallel: 4,
            backoff_base_ms: 500,
            image_mode: ImageMode::Path,
            image_dir: None,
            max_tokens: 1024,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) || !self.timeout_secs.is_finite() {
            return Err(Error::invalid("endpoint timeout must be positive"));
        }
        if self.max_parallel < 1 {
            return Err(Error::invalid("max_parallel must be at least 1"));
        }
        if self.base_url.is_empty() {
            return Err(Error::invalid("endpoint base_url is empty"));
        }
        Ok(())
    }

    pub fn url(&self) -> String {
        format!(
            "{}/{}",
            self.base_url.trim_end_matches('/'),
            self.path.trim_start_matches('/')
        )
    }

    pub fn image_path(&self, doc_id: &str) -> PathBuf {
        self.image_dir
            .clone()
            .unwrap_or_default()
            .join(format!("{doc_id}.png"))
    }
}

/// What the endpoint returned, and how many attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct RawReply {
    pub text: String,
    pub attempts: u32,
}

fn image_url(image: &Path, mode: ImageMode) -> Result<String> {
    match mode {
        ImageMode::Path => {
            let abs = if image.is_absolute() {
                image.to_path_buf()
            } else {
                std::env::current_dir()
                    .map_err(|e| Error::io(".", e))?
                    .join(image)
            };
            Ok(format!("file://{}", abs.display()))
        }
        ImageMode::Base64 => {
            let bytes = fs::read(image).map_err(|e| Error::io(image, e))?;
            let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
            Ok(format!("data:image/png;base64,{b64}"))
        }
    }
}

pub fn request_body(prompt: &str, image_url: &str, cfg: &EndpointConfig) -> Value {
    json!({
        "model": cfg.model,
        "max_tokens": cfg.max_tokens,
        "temperature": 0.0,
        "messages": [
            {
                "role": "user",
                "content": [
                    { "type": "image_url", "image_url": { "url": image_url } },
                    { "type": "text", "text": prompt }
                ]
            }
        ]
    })
}

/// `choices[0].message.content` of an OpenAI-style reply, or the raw body
/// when it has some other shape.
fn reply_text(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| {
            v.pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .map(str::to_owned)
        })
        .unwrap_or_else(|| body.to_owned())
}

/// Sends the prompt and page image, retrying transport failures and 5xx
/// replies with exponential backoff. A 4xx reply fails immediately.
pub fn request_regions_external(prompt: &str, image: &Path, cfg: &EndpointConfig) -> Result<RawReply> {
    cfg.validate()?;
    let body = request_body(prompt, &image_url(image, cfg.image_mode)?, cfg);
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs_f64(cfg.timeout_secs))
        .build()
        .map_err(|e| Error::Transport {
            attempts: 0,
            status: None,
            message: e.to_string(),
        })?;
    let url = cfg.url();
    let max_attempts = cfg.max_retries + 1;
    let mut last_status = None;
    let mut last_message = String::new();
    for attempt in 1..=max_attempts {
        if attempt > 1 {
            let wait = cfg.backoff_base_ms.saturating_mul(1 << (attempt - 2).min(16));
            thread::sleep(Duration::from_millis(wait));
        }
        match client.post(&url).json(&body).send() {
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    let text = resp.text().map_err(|e| Error::Transport {
                        attempts: attempt,
                        status: Some(status.as_u16()),
                        message: e.to_string(),
                    })?;
                    return Ok(RawReply {
                        text: reply_text(&text),
                        attempts: attempt,
                    });
                }
                if status.is_client_error() {
                    return Err(Error::HttpStatus {
                        status: status.as_u16(),
                        attempts: attempt,
                    });
                }
                last_status = Some(status.as_u16());
                last_message = format!("HTTP {status}");
            }
            Err(e) => {
                last_status = None;
                last_message = e.to_string();
            }
        }
    }
    Err(Error::Transport {
        attempts: max_attempts,
        status: last_status,
        message: last_message,
    })
}
