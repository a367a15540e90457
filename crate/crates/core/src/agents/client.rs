//! Language-model clients.

use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

pub const ENV_ENDPOINT: &str = "KF_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "KF_LLM_API_KEY";
pub const ENV_MODEL: &str = "KF_LLM_MODEL";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transcript exhausted after {0} responses")]
    Exhausted(usize),
    #[error("transcript {path}: {reason}")]
    Transcript { path: String, reason: String },
    #[error("{0} is not set")]
    MissingConfig(&'static str),
    #[error("request failed: {0}")]
    Request(String),
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
}

/// A text-in, text-out model. Implementations must tolerate concurrent calls.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, ClientError>;
}

/// Replays a fixed list of responses in call order and keeps every prompt.
#[derive(Debug, Default)]
pub struct ScriptedClient {
    responses: Vec<String>,
    state: Mutex<(usize, Vec<String>)>,
}

impl ScriptedClient {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        ScriptedClient {
            responses: responses.into_iter().map(Into::into).collect(),
            state: Mutex::new((0, Vec::new())),
        }
    }

    /// A JSON array of strings, or an object with a `responses` array.
    pub fn from_file(path: &Path) -> Result<Self, ClientError> {
        let bad = |reason: String| ClientError::Transcript {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let arr = match &v {
            Value::Array(a) => a,
            Value::Object(o) => o
                .get("responses")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("expected a `responses` array".into()))?,
            _ => return Err(bad("expected an array of strings".into())),
        };
        let responses = arr
            .iter()
            .enumerate()
            .map(|(i, r)| r.as_str().map(str::to_string).ok_or_else(|| bad(format!("entry {i} is not a string"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(responses))
    }

    pub fn prompts(&self) -> Vec<String> {
        self.state.lock().unwrap().1.clone()
    }

    pub fn calls(&self) -> usize {
        self.state.lock().unwrap().0
    }
}

impl LlmClient for ScriptedClient {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let mut st = self.state.lock().unwrap();
        st.1.push(prompt.to_string());
        let i = st.0;
        let r = self.responses.get(i).cloned().ok_or(ClientError::Exhausted(self.responses.len()))?;
        st.0 += 1;
        Ok(r)
    }
}

/// OpenAI-compatible chat-completions endpoint.
#[derive(Debug, Clone)]
pub struct HttpClient {
    url: String,
    api_key: Option<String>,
    model: String,
    timeout: Duration,
}

impl HttpClient {
    pub fn new(endpoint: &str, api_key: Option<String>, model: &str) -> Self {
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        HttpClient {
            url,
            api_key,
            model: model.to_string(),
            timeout: Duration::from_secs(600),
        }
    }

    pub fn from_env() -> Result<Self, ClientError> {
        let endpoint = std::env::var(ENV_ENDPOINT).map_err(|_| ClientError::MissingConfig(ENV_ENDPOINT))?;
        let key = std::env::var(ENV_API_KEY).ok();
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".into());
        Ok(Self::new(&endpoint, key, &model))
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let mut req = ureq::post(&self.url)
            .config()
            .timeout_global(Some(self.timeout))
            .build();
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut resp = req.send_json(&body).map_err(|e| ClientError::Request(e.to_string()))?;
        let v: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::BadResponse(e.to_string()))?;
        extract_content(&v)
    }
}

fn extract_content(v: &Value) -> Result<String, ClientError> {
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ClientError::BadResponse(v.to_string().chars().take(200).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_replays_then_exhausts() {
        let c = ScriptedClient::new(["a", "b"]);
        assert_eq!(c.complete("p1").unwrap(), "a");
        assert_eq!(c.complete("p2").unwrap(), "b");
        assert!(matches!(c.complete("p3"), Err(ClientError::Exhausted(2))));
        assert_eq!(c.prompts(), ["p1", "p2", "p3"]);
        assert_eq!(c.calls(), 2);
    }

    #[test]
    fn transcript_files() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("t.json");
        std::fs::write(&p, r#"{"responses": ["x", "y"]}"#).unwrap();
        assert_eq!(ScriptedClient::from_file(&p).unwrap().responses, ["x", "y"]);
        std::fs::write(&p, r#"["x"]"#).unwrap();
        assert_eq!(ScriptedClient::from_file(&p).unwrap().responses, ["x"]);
        std::fs::write(&p, r#"[1]"#).unwrap();
        assert!(ScriptedClient::from_file(&p).is_err());
        assert!(ScriptedClient::from_file(&d.path().join("missing")).is_err());
    }

    #[test]
    fn http_url_and_content() {
        assert_eq!(HttpClient::new("http://h/v1/", None, "m").url(), "http://h/v1/chat/completions");
        assert_eq!(HttpClient::new("http://h/v1/chat/completions", None, "m").url(), "http://h/v1/chat/completions");
        let v = json!({"choices": [{"message": {"content": "hi"}}]});
        assert_eq!(extract_content(&v).unwrap(), "hi");
        assert!(extract_content(&json!({})).is_err());
    }

    #[test]
    fn http_round_trip_against_local_server() {
        use std::io::{Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 65536];
            let mut got = Vec::new();
            // read until the JSON body has arrived
            while !String::from_utf8_lossy(&got).contains("\"messages\"") || !got.ends_with(b"}") {
                let n = s.read(&mut buf).unwrap();
                if n == 0 {
                    break;
                }
                got.extend_from_slice(&buf[..n]);
            }
            let body = r#"{"choices":[{"message":{"content":"pong"}}]}"#;
            write!(s, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
            String::from_utf8_lossy(&got).into_owned()
        });
        let c = HttpClient::new(&format!("http://{addr}/v1"), Some("secret".into()), "m1");
        assert_eq!(c.complete("ping").unwrap(), "pong");
        let req = server.join().unwrap();
        assert!(req.starts_with("POST /v1/chat/completions"));
        assert!(req.to_ascii_lowercase().contains("authorization: bearer secret"));
        assert!(req.contains("\"ping\""));
    }
}
