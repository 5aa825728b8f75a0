//! OpenAI-compatible chat-completion client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    match_label, with_retry, BackendError, BackendIdentity, Capabilities, Classification, GenerationRequest,
    GenerationResponse, ModelBackend, RetryPolicy,
};
use crate::prompts::ChatTranscript;

fn default_timeout() -> u64 {
    60
}

fn default_attempts() -> u32 {
    3
}

fn default_top_logprobs() -> u32 {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    /// Request first-token log-probabilities for classification.
    #[serde(default = "default_true")]
    pub logprobs: bool,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: u32,
}

fn default_true() -> bool {
    true
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_attempts: default_attempts(),
            logprobs: true,
            top_logprobs: default_top_logprobs(),
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    token: Option<String>,
    retry: RetryPolicy,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let token = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| BackendError::InvalidRequest(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        let retry = RetryPolicy {
            max_attempts: config.max_attempts,
            ..RetryPolicy::default()
        };
        Ok(Self {
            config,
            agent,
            token,
            retry,
        })
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }

    fn body(&self, transcript: &ChatTranscript, max_tokens: u32, logprobs: bool) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": transcript,
            "temperature": 0,
            "max_tokens": max_tokens,
        });
        if logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(self.config.top_logprobs);
        }
        body
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        with_retry(self.retry, |_| {
            let mut req = self.agent.post(&self.url());
            if let Some(token) = &self.token {
                req = req.set("Authorization", &format!("Bearer {token}"));
            }
            match req.send_json(body.clone()) {
                Ok(resp) => resp
                    .into_json::<Value>()
                    .map_err(|e| BackendError::MalformedResponse(e.to_string())),
                Err(ureq::Error::Status(code, resp)) => {
                    let detail = resp.into_string().unwrap_or_default();
                    Err(BackendError::Transport {
                        message: format!("HTTP {code}: {}", detail.trim()),
                        retryable: code == 429 || code >= 500,
                    })
                }
                Err(ureq::Error::Transport(t)) => Err(BackendError::Transport {
                    message: t.to_string(),
                    retryable: true,
                }),
            }
        })
    }
}

fn completion_text(resp: &Value) -> Result<String, BackendError> {
    resp.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into()))
}

/// Sum first-token probability mass per label. A candidate token supports a
/// label when, trimmed and case-folded, it is a non-empty prefix of it.
fn first_token_scores(resp: &Value, labels: &[String]) -> Option<Vec<f64>> {
    let top = resp.pointer("/choices/0/logprobs/content/0/top_logprobs")?.as_array()?;
    let folded: Vec<String> = labels.iter().map(|l| l.to_lowercase()).collect();
    let mut mass = vec![0.0; labels.len()];
    for cand in top {
        let token = cand.get("token")?.as_str()?.trim().to_lowercase();
        let lp = cand.get("logprob")?.as_f64()?;
        if token.is_empty() {
            continue;
        }
        for (i, l) in folded.iter().enumerate() {
            if l.starts_with(&token) {
                mass[i] += lp.exp();
            }
        }
    }
    let total: f64 = mass.iter().sum();
    (total > 0.0).then(|| mass.into_iter().map(|m| m / total).collect())
}

impl ModelBackend for HttpBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            backend: "http".into(),
            model: self.config.model.clone(),
        }
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_label_distribution: self.config.logprobs,
            deterministic: false,
        }
    }

    fn classify(&self, transcript: &ChatTranscript, labels: &[String]) -> Result<Classification, BackendError> {
        let resp = self.post(&self.body(transcript, 8, self.config.logprobs))?;
        if self.config.logprobs {
            if let Some(p) = first_token_scores(&resp, labels) {
                return Ok(Classification::from_probabilities(labels.to_vec(), p, false));
            }
        }
        let text = completion_text(&resp)?;
        match match_label(&text, labels) {
            Some(i) => Ok(Classification::one_hot(labels.to_vec(), i)),
            None => Err(BackendError::UnparseablePrediction { text }),
        }
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let resp = self.post(&self.body(&request.transcript, request.max_tokens, false))?;
        Ok(GenerationResponse {
            text: completion_text(&resp)?,
            label_log_scores: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::Speaker;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};
    use std::thread;

    /// Serve canned (status, body) replies in order, recording request bodies.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1"), seen)
    }

    fn backend(url: String) -> HttpBackend {
        HttpBackend::new(HttpConfig::new(url, "m"))
            .unwrap()
            .with_retry_policy(RetryPolicy {
                max_attempts: 3,
                base_delay: Duration::from_millis(1),
            })
    }

    fn prompt() -> ChatTranscript {
        let mut t = ChatTranscript::new();
        t.push(Speaker::User, "Text: hi").unwrap();
        t
    }

    fn labels() -> Vec<String> {
        vec!["Positive".into(), "Negative".into()]
    }

    #[test]
    fn logprob_distribution() {
        let body = json!({"choices": [{"message": {"content": "Neg"},
        "logprobs": {"content": [{"token": "Neg", "logprob": -0.1, "top_logprobs": [
            {"token": "Neg", "logprob": (0.6f64).ln()},
            {"token": " negative", "logprob": (0.1f64).ln()},
            {"token": "Pos", "logprob": (0.2f64).ln()},
            {"token": "The", "logprob": (0.1f64).ln()}
        ]}]}}]});
        let (url, seen) = serve(vec![(200, body.to_string())]);
        let c = backend(url).classify(&prompt(), &labels()).unwrap();
        assert!(!c.one_hot);
        assert!((c.probabilities[1] - 0.7 / 0.9).abs() < 1e-9);
        assert_eq!(c.predicted_label(), "Negative");
        let sent: Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["temperature"], 0);
        assert_eq!(sent["messages"][0]["role"], "user");
        assert_eq!(sent["messages"][0]["content"], "Text: hi");
    }

    #[test]
    fn falls_back_to_text_and_retries() {
        let ok = json!({"choices": [{"message": {"content": "Positive"}}]}).to_string();
        let (url, seen) = serve(vec![(503, "{}".into()), (429, "{}".into()), (200, ok)]);
        let c = backend(url).classify(&prompt(), &labels()).unwrap();
        assert!(c.one_hot);
        assert_eq!(c.predicted_label(), "Positive");
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn client_errors_not_retried() {
        let (url, seen) = serve(vec![(400, "{\"error\":\"bad\"}".into())]);
        let err = backend(url).generate(&GenerationRequest::new(prompt())).unwrap_err();
        assert!(err.is_transport() && !err.is_retryable());
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn unparseable_prediction() {
        let body = json!({"choices": [{"message": {"content": "no idea"}}]}).to_string();
        let (url, _) = serve(vec![(200, body)]);
        let mut cfg = HttpConfig::new(url, "m");
        cfg.logprobs = false;
        let err = HttpBackend::new(cfg)
            .unwrap()
            .classify(&prompt(), &labels())
            .unwrap_err();
        assert!(matches!(err, BackendError::UnparseablePrediction { .. }));
    }

    #[test]
    fn missing_token_env_is_an_error() {
        let mut cfg = HttpConfig::new("http://localhost", "m");
        cfg.api_key_env = Some("FAITHCHECK_SURELY_UNSET_VAR".into());
        assert!(HttpBackend::new(cfg).is_err());
    }
}
