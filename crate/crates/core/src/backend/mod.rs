//! Classifier-capable chat models behind one interface.
//!
//! A backend answers two kinds of request: a label distribution for a
//! transcript that ends in a classification prompt, and a greedy text
//! completion. [`LexiconModel`] is a deterministic in-process stand-in;
//! [`HttpBackend`] talks to a chat-completion endpoint.

mod http;
mod lexicon;

pub use http::{HttpBackend, HttpConfig};
pub use lexicon::{ExplanationPolicy, FillPolicy, LexiconError, LexiconModel};

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel::map_bounded;
use crate::prompts::ChatTranscript;
use crate::textops::match_key;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {message}")]
    Transport { message: String, retryable: bool },
    #[error("response names no known label: {text:?}")]
    UnparseablePrediction { text: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { retryable: true, .. })
    }

    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_label_distribution: bool,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIdentity {
    pub backend: String,
    pub model: String,
}

/// Greedy decoding is the only mode: temperature 0, one beam.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    #[default]
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRequest {
    pub transcript: ChatTranscript,
    pub max_tokens: u32,
    pub decoding: Decoding,
}

impl GenerationRequest {
    pub const DEFAULT_MAX_TOKENS: u32 = 256;

    pub fn new(transcript: ChatTranscript) -> Self {
        Self {
            transcript,
            max_tokens: Self::DEFAULT_MAX_TOKENS,
            decoding: Decoding::Greedy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResponse {
    /// Raw completion, untrimmed.
    pub text: String,
    /// Per-label log-scores when the backend exposes them.
    pub label_log_scores: Option<Vec<(String, f64)>>,
}

/// A label distribution and its argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub labels: Vec<String>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
    /// True when the distribution was reconstructed from generated text.
    pub one_hot: bool,
}

impl Classification {
    /// Argmax with ties going to the earliest label.
    pub fn from_probabilities(labels: Vec<String>, probabilities: Vec<f64>, one_hot: bool) -> Self {
        let predicted = argmax_first(&probabilities);
        Self {
            labels,
            probabilities,
            predicted,
            one_hot,
        }
    }

    pub fn one_hot(labels: Vec<String>, index: usize) -> Self {
        let probabilities = (0..labels.len()).map(|i| f64::from(u8::from(i == index))).collect();
        Self {
            labels,
            probabilities,
            predicted: index,
            one_hot: true,
        }
    }

    pub fn predicted_label(&self) -> &str {
        &self.labels[self.predicted]
    }

    pub fn probability_of(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.probabilities[i])
    }
}

/// Index of the largest value, earliest on ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub trait ModelBackend: Send + Sync {
    fn identity(&self) -> BackendIdentity;

    fn capabilities(&self) -> Capabilities;

    /// Distribution over `labels` for the final user turn.
    fn classify(&self, transcript: &ChatTranscript, labels: &[String]) -> Result<Classification, BackendError>;

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for &B {
    fn identity(&self) -> BackendIdentity {
        (**self).identity()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn classify(&self, transcript: &ChatTranscript, labels: &[String]) -> Result<Classification, BackendError> {
        (**self).classify(transcript, labels)
    }
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        (**self).generate(request)
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for Box<B> {
    fn identity(&self) -> BackendIdentity {
        (**self).identity()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn classify(&self, transcript: &ChatTranscript, labels: &[String]) -> Result<Classification, BackendError> {
        (**self).classify(transcript, labels)
    }
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        (**self).generate(request)
    }
}

/// Checked classification: validates the request and the returned
/// distribution before handing it on.
pub fn classify<B: ModelBackend + ?Sized>(
    backend: &B,
    transcript: &ChatTranscript,
    labels: &[String],
) -> Result<Classification, BackendError> {
    if labels.is_empty() {
        return Err(BackendError::InvalidRequest("label list is empty".into()));
    }
    if !transcript.ends_with_user() {
        return Err(BackendError::InvalidRequest(
            "transcript must end with a user turn".into(),
        ));
    }
    let out = backend.classify(transcript, labels)?;
    if out.labels != labels || out.probabilities.len() != labels.len() {
        return Err(BackendError::MalformedResponse(
            "distribution does not cover the requested labels".into(),
        ));
    }
    let total: f64 = out.probabilities.iter().sum();
    if out.probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(BackendError::MalformedResponse(format!(
            "probabilities must be nonnegative and sum to 1 (got {total})"
        )));
    }
    Ok(Classification::from_probabilities(
        out.labels,
        out.probabilities,
        out.one_hot,
    ))
}

pub fn generate<B: ModelBackend + ?Sized>(backend: &B, transcript: &ChatTranscript) -> Result<String, BackendError> {
    if !transcript.ends_with_user() {
        return Err(BackendError::InvalidRequest(
            "transcript must end with a user turn".into(),
        ));
    }
    Ok(backend.generate(&GenerationRequest::new(transcript.clone()))?.text)
}

/// Map generated text onto a label: exact match after trimming quotes and
/// punctuation, then a leading-word match, then a unique whole-word mention.
pub fn match_label(text: &str, labels: &[String]) -> Option<usize> {
    let cleaned = text.trim();
    let cleaned = cleaned.rsplit_once("Answer:").map_or(cleaned, |(_, rest)| rest).trim();
    let whole = match_key(cleaned);
    if let Some(i) = labels.iter().position(|l| match_key(l) == whole) {
        return Some(i);
    }
    let words: Vec<String> = cleaned.split_whitespace().map(match_key).collect();
    if let Some(first) = words.first() {
        if let Some(i) = labels.iter().position(|l| &match_key(l) == first) {
            return Some(i);
        }
    }
    let mentioned: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| words.contains(&match_key(l)))
        .map(|(i, _)| i)
        .collect();
    match mentioned.as_slice() {
        [only] => Some(*only),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

/// Run `op` until it succeeds, fails with a non-retryable error, or the
/// attempt budget is spent. Delays double after each failure.
pub fn with_retry<T>(
    policy: RetryPolicy,
    mut op: impl FnMut(u32) -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut delay = policy.base_delay;
    let mut attempt = 1;
    loop {
        match op(attempt) {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() && attempt < policy.max_attempts.max(1) => {
                thread::sleep(delay);
                delay = delay.saturating_mul(2);
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{} of {total} request(s) failed at indices {failed:?}", failed.len())]
pub struct BatchError {
    pub failed: Vec<usize>,
    pub total: usize,
}

/// Positionally aligned generation results.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub responses: Vec<Result<GenerationResponse, BackendError>>,
}

impl BatchOutcome {
    pub fn failed_indices(&self) -> Vec<usize> {
        self.responses
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_err())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn error(&self) -> Option<BatchError> {
        let failed = self.failed_indices();
        (!failed.is_empty()).then_some(BatchError {
            failed,
            total: self.responses.len(),
        })
    }
}

/// Issue `requests` with at most `concurrency` in flight. Each failure is
/// isolated to its own slot.
pub fn batch<B: ModelBackend + ?Sized>(
    backend: &B,
    requests: &[GenerationRequest],
    concurrency: usize,
) -> BatchOutcome {
    let responses = map_bounded(requests, concurrency, |_, req| {
        if req.transcript.ends_with_user() {
            backend.generate(req)
        } else {
            Err(BackendError::InvalidRequest(
                "transcript must end with a user turn".into(),
            ))
        }
    });
    BatchOutcome { responses }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::Speaker;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| (*s).to_owned()).collect()
    }

    fn user(text: &str) -> ChatTranscript {
        let mut t = ChatTranscript::new();
        t.push(Speaker::User, text).unwrap();
        t
    }

    #[test]
    fn argmax_tie_goes_first() {
        assert_eq!(argmax_first(&[0.5, 0.5]), 0);
        assert_eq!(argmax_first(&[0.2, 0.5, 0.5]), 1);
    }

    #[test]
    fn label_matching() {
        let ls = labels(&["Positive", "Negative"]);
        assert_eq!(match_label("Negative", &ls), Some(1));
        assert_eq!(match_label("  'positive'.\n", &ls), Some(0));
        assert_eq!(match_label("Answer: Negative", &ls), Some(1));
        assert_eq!(match_label("Negative. The text is sad", &ls), Some(1));
        assert_eq!(match_label("It is clearly negative overall", &ls), Some(1));
        assert_eq!(match_label("positive or negative", &ls), Some(0));
        assert_eq!(match_label("either could be right", &ls), None);
        assert_eq!(match_label("", &ls), None);
    }

    struct Flaky {
        fail_first: u32,
        calls: AtomicU32,
        retryable: bool,
    }

    impl ModelBackend for Flaky {
        fn identity(&self) -> BackendIdentity {
            BackendIdentity {
                backend: "flaky".into(),
                model: "test".into(),
            }
        }
        fn capabilities(&self) -> Capabilities {
            Capabilities {
                supports_label_distribution: false,
                deterministic: true,
            }
        }
        fn classify(&self, _: &ChatTranscript, labels: &[String]) -> Result<Classification, BackendError> {
            Ok(Classification::one_hot(labels.to_vec(), 0))
        }
        fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
            let text = &req.transcript.turns()[0].text;
            if text == "fail" {
                return Err(BackendError::Transport {
                    message: "down".into(),
                    retryable: false,
                });
            }
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(BackendError::Transport {
                    message: "blip".into(),
                    retryable: self.retryable,
                });
            }
            Ok(GenerationResponse {
                text: format!("echo {text}"),
                label_log_scores: None,
            })
        }
    }

    fn quick() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
        }
    }

    #[test]
    fn retry_recovers_within_budget() {
        let b = Flaky {
            fail_first: 2,
            calls: AtomicU32::new(0),
            retryable: true,
        };
        let req = GenerationRequest::new(user("hi"));
        let out = with_retry(quick(), |_| b.generate(&req)).unwrap();
        assert_eq!(out.text, "echo hi");
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retry_gives_up_after_three_attempts() {
        let b = Flaky {
            fail_first: 10,
            calls: AtomicU32::new(0),
            retryable: true,
        };
        let req = GenerationRequest::new(user("hi"));
        assert!(with_retry(quick(), |_| b.generate(&req)).is_err());
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retry_skips_permanent_errors() {
        let b = Flaky {
            fail_first: 10,
            calls: AtomicU32::new(0),
            retryable: false,
        };
        let req = GenerationRequest::new(user("hi"));
        assert!(with_retry(quick(), |_| b.generate(&req)).is_err());
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn batch_isolates_failures() {
        let b = Flaky {
            fail_first: 0,
            calls: AtomicU32::new(0),
            retryable: true,
        };
        let reqs: Vec<_> = ["a", "fail", "c"]
            .iter()
            .map(|t| GenerationRequest::new(user(t)))
            .collect();
        let out = batch(&b, &reqs, 4);
        assert_eq!(out.responses.len(), 3);
        assert_eq!(out.responses[0].as_ref().unwrap().text, "echo a");
        assert!(out.responses[1].is_err());
        assert_eq!(out.responses[2].as_ref().unwrap().text, "echo c");
        assert_eq!(
            out.error(),
            Some(BatchError {
                failed: vec![1],
                total: 3
            })
        );
        assert!(batch(&b, &[], 4).responses.is_empty());
    }

    #[test]
    fn checked_classify_rejects_bad_requests() {
        let b = Flaky {
            fail_first: 0,
            calls: AtomicU32::new(0),
            retryable: true,
        };
        assert!(matches!(
            classify(&b, &user("x"), &[]),
            Err(BackendError::InvalidRequest(_))
        ));
        let mut t = user("x");
        t.push(Speaker::Assistant, "y").unwrap();
        assert!(matches!(
            classify(&b, &t, &labels(&["A", "B"])),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[2.0, -2.0]);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
        let big = softmax(&[1000.0, 999.0]);
        assert!(big.iter().all(|v| v.is_finite()));
    }
}
