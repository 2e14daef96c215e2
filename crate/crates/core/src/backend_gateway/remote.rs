//! HTTP client for a remote segmentation bridge.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use ureq::Agent;

use super::wire::{
    from_body, to_body, WireError, WireLabelRequest, WireLabelResponse, WireSegmentRequest,
    WireSegmentResponse, INFO_PATH, SCORE_LABELS_PATH, SEGMENT_PATH,
};
use super::{
    check_capabilities, BackendError, LabelRequest, LabelScore, ScoredMask, SegmentRequest,
    Segmenter, SegmenterCapabilities,
};

const MAX_RESPONSE_BYTES: u64 = 512 * 1024 * 1024;

/// Exponential backoff for transport failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            initial_backoff: Duration::from_millis(200),
            multiplier: 2.0,
            max_backoff: Duration::from_secs(5),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_attempts: 1,
            ..Self::default()
        }
    }

    /// Delay before retry number `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.powi(attempt.saturating_sub(1) as i32);
        self.initial_backoff.mul_f64(factor).min(self.max_backoff)
    }

    /// Runs `op`, retrying retryable errors until the attempt cap.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut attempt = 1;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < self.max_attempts.max(1) => {
                    let wait = self.backoff(attempt);
                    log::warn!("attempt {attempt} failed ({e}); retrying in {wait:?}");
                    thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl RemoteOptions {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            max_in_flight: 4,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn hold<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().expect("gate lock");
            while *free == 0 {
                free = self.cv.wait(free).expect("gate lock");
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().expect("gate lock") += 1;
        self.cv.notify_one();
        out
    }
}

/// Plain status-and-bytes HTTP access. No retries, no status interpretation.
pub struct HttpClient {
    agent: Agent,
    base: String,
}

impl HttpClient {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            base: endpoint.trim_end_matches('/').to_string(),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    pub fn get(&self, path: &str) -> Result<(u16, Vec<u8>), BackendError> {
        let resp = self
            .agent
            .get(format!("{}{path}", self.base))
            .call()
            .map_err(transport)?;
        read(resp)
    }

    pub fn post(&self, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>), BackendError> {
        let resp = self
            .agent
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .send(body)
            .map_err(transport)?;
        read(resp)
    }
}

fn transport(e: ureq::Error) -> BackendError {
    BackendError::Transport(e.to_string())
}

fn read(mut resp: ureq::http::Response<ureq::Body>) -> Result<(u16, Vec<u8>), BackendError> {
    let status = resp.status().as_u16();
    let body = resp
        .body_mut()
        .with_config()
        .limit(MAX_RESPONSE_BYTES)
        .read_to_vec()
        .map_err(transport)?;
    Ok((status, body))
}

/// Maps a non-200 status to the error taxonomy.
pub fn status_error(status: u16, body: &[u8]) -> BackendError {
    let detail = serde_json::from_slice::<WireError>(body)
        .map(|e| e.error)
        .unwrap_or_else(|_| String::from_utf8_lossy(body).into_owned());
    match status {
        400 => BackendError::InvalidRequest(detail),
        500..=599 => BackendError::Transport(format!("HTTP {status}: {detail}")),
        _ => BackendError::Protocol(format!("unexpected HTTP {status}: {detail}")),
    }
}

pub struct RemoteSegmenter {
    http: HttpClient,
    caps: SegmenterCapabilities,
    retry: RetryPolicy,
    gate: Gate,
}

impl RemoteSegmenter {
    /// Fetches `/v1/info` and keeps the advertised capabilities.
    pub fn connect(opts: RemoteOptions) -> Result<Self, BackendError> {
        let http = HttpClient::new(&opts.endpoint, opts.timeout);
        let caps = opts.retry.run(|| {
            let (status, body) = http.get(INFO_PATH)?;
            if status != 200 {
                return Err(status_error(status, &body));
            }
            from_body::<SegmenterCapabilities>(&body)
        })?;
        log::info!("connected to {} ({})", opts.endpoint, caps.model_name);
        Ok(Self {
            http,
            caps,
            retry: opts.retry,
            gate: Gate::new(opts.max_in_flight),
        })
    }

    fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>, BackendError> {
        self.retry.run(|| {
            let (status, resp) = self.gate.hold(|| self.http.post(path, body))?;
            if status != 200 {
                return Err(status_error(status, &resp));
            }
            Ok(resp)
        })
    }
}

impl Segmenter for RemoteSegmenter {
    fn capabilities(&self) -> &SegmenterCapabilities {
        &self.caps
    }

    fn segment(&self, request: &SegmentRequest) -> Result<Vec<ScoredMask>, BackendError> {
        request.validate()?;
        check_capabilities(&self.caps, request)?;
        let body = to_body(&WireSegmentRequest::from_request(request));
        let resp = self.post(SEGMENT_PATH, &body)?;
        from_body::<WireSegmentResponse>(&resp)?.into_masks(request)
    }

    fn score_labels(&self, request: &LabelRequest) -> Result<Vec<LabelScore>, BackendError> {
        if !self.caps.supports_label_scoring {
            return Err(BackendError::Capability(format!(
                "{} does not score labels",
                self.caps.model_name
            )));
        }
        if request.labels.is_empty() {
            return Err(BackendError::InvalidRequest("empty label list".into()));
        }
        let body = to_body(&WireLabelRequest::from_request(request));
        let resp = self.post(SCORE_LABELS_PATH, &body)?;
        from_body::<WireLabelResponse>(&resp)?.into_scores(request)
    }
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(1),
            multiplier: 2.0,
            max_backoff: Duration::from_millis(3),
        }
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff(1), Duration::from_millis(200));
        assert_eq!(p.backoff(2), Duration::from_millis(400));
        assert_eq!(p.backoff(3), Duration::from_millis(800));
        assert_eq!(p.backoff(10), Duration::from_secs(5));
    }

    #[test]
    fn transport_errors_retry_up_to_cap() {
        let calls = Cell::new(0);
        let r: Result<(), _> = fast().run(|| {
            calls.set(calls.get() + 1);
            Err(BackendError::Transport("down".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn capability_errors_never_retry() {
        let calls = Cell::new(0);
        let r: Result<(), _> = fast().run(|| {
            calls.set(calls.get() + 1);
            Err(BackendError::Capability("no".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn recovers_after_transient_failure() {
        let calls = Cell::new(0);
        let r = fast().run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 2 {
                Err(BackendError::Transport("blip".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(r, Ok(7));
    }

    #[test]
    fn status_mapping() {
        assert!(matches!(status_error(400, br#"{"error":"bad"}"#), BackendError::InvalidRequest(m) if m == "bad"));
        assert!(status_error(503, b"").is_retryable());
        assert!(matches!(status_error(404, b"nope"), BackendError::Protocol(_)));
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let mut opts = RemoteOptions::new("http://127.0.0.1:9");
        opts.retry = RetryPolicy::none();
        opts.timeout = Duration::from_secs(2);
        assert!(matches!(RemoteSegmenter::connect(opts), Err(BackendError::Transport(_))));
    }
}
