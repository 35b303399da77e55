use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Classifier, ClassifyError, ClassifyRequest, ClassifyResult};

/// Environment variable naming the classifier service base URL.
pub const CLASSIFIER_URL_ENV: &str = "DISAS_CLASSIFIER_URL";

const CLASSIFY_PATH: &str = "/v1/classify";

#[derive(Serialize)]
struct WireRequest<'a> {
    requests: Vec<WireItem<'a>>,
}

#[derive(Serialize)]
struct WireItem<'a> {
    text: &'a str,
    spans: Vec<WireSpan>,
}

#[derive(Serialize)]
struct WireSpan {
    start: usize,
    end: usize,
    /// Extension: lets oracle-backed stubs answer without parsing the text.
    address: u64,
}

#[derive(Deserialize)]
struct WireResponse {
    results: Vec<ClassifyResult>,
}

/// HTTP client for a classifier service speaking the `/v1/classify` protocol.
#[derive(Debug, Clone)]
pub struct RemoteClassifier {
    url: String,
    client: reqwest::blocking::Client,
    retries: u32,
    backoff: Duration,
}

impl RemoteClassifier {
    pub fn new(endpoint: &str) -> Result<Self, ClassifyError> {
        Self::with_timeout(endpoint, Duration::from_secs(30))
    }

    pub fn with_timeout(endpoint: &str, timeout: Duration) -> Result<Self, ClassifyError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClassifyError::Transport(e.to_string()))?;
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with(CLASSIFY_PATH) {
            base.to_string()
        } else {
            format!("{base}{CLASSIFY_PATH}")
        };
        Ok(RemoteClassifier {
            url,
            client,
            retries: 2,
            backoff: Duration::from_millis(250),
        })
    }

    /// Reads the endpoint from [`CLASSIFIER_URL_ENV`].
    pub fn from_env() -> Result<Self, ClassifyError> {
        let url = std::env::var(CLASSIFIER_URL_ENV)
            .map_err(|_| ClassifyError::Transport(format!("{CLASSIFIER_URL_ENV} is not set")))?;
        Self::new(&url)
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn attempt(&self, body: &WireRequest<'_>) -> Result<Vec<ClassifyResult>, ClassifyError> {
        let resp = self
            .client
            .post(&self.url)
            .json(body)
            .send()
            .map_err(|e| ClassifyError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(ClassifyError::Transport(format!(
                "server returned {status}"
            )));
        }
        if !status.is_success() {
            let msg = resp.text().unwrap_or_default();
            return Err(ClassifyError::Rejected(format!("{status}: {msg}")));
        }
        let parsed: WireResponse = resp
            .json()
            .map_err(|e| ClassifyError::BadResponse(e.to_string()))?;
        Ok(parsed.results)
    }
}

impl Classifier for RemoteClassifier {
    fn classify(&self, batch: &[ClassifyRequest]) -> Result<Vec<ClassifyResult>, ClassifyError> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        if batch.iter().any(|r| !r.is_well_formed()) {
            return Err(ClassifyError::BadRequest);
        }
        let body = WireRequest {
            requests: batch
                .iter()
                .map(|r| WireItem {
                    text: &r.snippet.text,
                    spans: r
                        .snippet
                        .word_spans
                        .iter()
                        .zip(&r.queried)
                        .map(|(s, a)| WireSpan {
                            start: s.start,
                            end: s.end,
                            address: *a,
                        })
                        .collect(),
                })
                .collect(),
        };
        let mut delay = self.backoff;
        let mut attempt = 0;
        let results = loop {
            match self.attempt(&body) {
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    attempt += 1;
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                other => break other?,
            }
        };
        if results.len() != batch.len() {
            return Err(ClassifyError::BadResponse(format!(
                "{} results for {} requests",
                results.len(),
                batch.len()
            )));
        }
        for (req, res) in batch.iter().zip(&results) {
            if res.probabilities.len() != req.queried.len()
                || res.probabilities.iter().any(|p| !(0.0..=1.0).contains(p))
            {
                return Err(ClassifyError::BadResponse(
                    "probabilities do not match the queried spans".into(),
                ));
            }
        }
        Ok(results)
    }
}
