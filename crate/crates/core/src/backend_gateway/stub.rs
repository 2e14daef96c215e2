//! In-process HTTP server imitating a segmentation bridge in mock mode.
//!
//! `/v1/segment` answers with the union of the positive box interiors at
//! score 0.9; `/v1/score_labels` scores each label by a hash of its name.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use tiny_http::{Header, Method, Request, Response, Server};

use super::wire::{
    to_body, WireError, WireLabelRequest, WireLabelResponse, WireSegmentRequest,
    WireSegmentResponse, INFO_PATH, SCORE_LABELS_PATH, SEGMENT_PATH,
};
use super::{
    BackendError, LabelScore, Polarity, ScoredMask, SegmentRequest, SegmenterCapabilities,
};
use crate::data_ingest::{encode_rle, BitGrid};

pub const STUB_SCORE: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct StubOptions {
    pub model_name: String,
    pub supports_text: bool,
    pub supports_negative_boxes: bool,
    pub supports_label_scoring: bool,
    /// When false, the model endpoints answer 503.
    pub model_loaded: bool,
    /// Emit RLE whose counts do not sum to h*w.
    pub malformed_rle: bool,
}

impl Default for StubOptions {
    fn default() -> Self {
        Self {
            model_name: "stub".into(),
            supports_text: true,
            supports_negative_boxes: true,
            supports_label_scoring: true,
            model_loaded: true,
            malformed_rle: false,
        }
    }
}

impl StubOptions {
    fn capabilities(&self) -> SegmenterCapabilities {
        SegmenterCapabilities {
            model_name: self.model_name.clone(),
            supports_text: self.supports_text,
            supports_negative_boxes: self.supports_negative_boxes,
            supports_label_scoring: self.supports_label_scoring,
        }
    }
}

/// Listens on an ephemeral loopback port until dropped.
pub struct StubServer {
    server: Arc<Server>,
    addr: SocketAddr,
    worker: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(opts: StubOptions) -> std::io::Result<Self> {
        let server = Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("stub bound to a non-IP address"))?;
        let server = Arc::new(server);
        let srv = Arc::clone(&server);
        let worker = std::thread::spawn(move || {
            for req in srv.incoming_requests() {
                handle(req, &opts);
            }
        });
        Ok(Self {
            server,
            addr,
            worker: Some(worker),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn handle(mut req: Request, opts: &StubOptions) {
    let mut body = Vec::new();
    let (status, payload) = match req.as_reader().read_to_end(&mut body) {
        Err(e) => (400, error_body(&format!("unreadable body: {e}"))),
        Ok(_) => route(req.method(), req.url(), &body, opts),
    };
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let resp = Response::from_data(payload)
        .with_status_code(status)
        .with_header(header);
    if let Err(e) = req.respond(resp) {
        log::debug!("stub failed to respond: {e}");
    }
}

fn error_body(msg: &str) -> Vec<u8> {
    to_body(&WireError { error: msg.to_string() })
}

/// Dispatches one request; returns status and body.
pub fn route(method: &Method, url: &str, body: &[u8], opts: &StubOptions) -> (u16, Vec<u8>) {
    match (method, url) {
        (Method::Get, INFO_PATH) => (200, to_body(&opts.capabilities())),
        (Method::Post, SEGMENT_PATH | SCORE_LABELS_PATH) if !opts.model_loaded => {
            (503, error_body("model not loaded"))
        }
        (Method::Post, SEGMENT_PATH) => respond_with(segment(body, opts)),
        (Method::Post, SCORE_LABELS_PATH) => respond_with(score_labels(body, opts)),
        _ => (404, error_body(&format!("no route for {method} {url}"))),
    }
}

fn respond_with(r: Result<Vec<u8>, BackendError>) -> (u16, Vec<u8>) {
    match r {
        Ok(b) => (200, b),
        Err(BackendError::InvalidRequest(m)) | Err(BackendError::Capability(m)) => {
            (400, error_body(&m))
        }
        Err(e) => (400, error_body(&e.to_string())),
    }
}

fn parse<'a, T: serde::Deserialize<'a>>(body: &'a [u8]) -> Result<T, BackendError> {
    serde_json::from_slice(body).map_err(|e| BackendError::InvalidRequest(e.to_string()))
}

fn segment(body: &[u8], opts: &StubOptions) -> Result<Vec<u8>, BackendError> {
    let req = parse::<WireSegmentRequest>(body)?.into_request()?;
    super::check_capabilities(&opts.capabilities(), &req)?;
    let masks = stub_masks(&req);
    let mut resp = WireSegmentResponse::new(req.request_id, &masks);
    if opts.malformed_rle {
        for m in &mut resp.masks {
            m.counts.push(1);
        }
    }
    Ok(to_body(&resp))
}

/// The deterministic answer of the mock bridge.
pub fn stub_masks(req: &SegmentRequest) -> Vec<ScoredMask> {
    let positives: Vec<_> = req
        .boxes
        .iter()
        .filter(|b| b.polarity == Polarity::Positive)
        .collect();
    if positives.is_empty() || req.max_masks == 0 {
        return Vec::new();
    }
    let mut grid = BitGrid::new(req.image.height(), req.image.width());
    for b in positives {
        grid.fill_box(&b.rect, true);
    }
    vec![ScoredMask {
        mask: encode_rle(&grid),
        score: STUB_SCORE,
    }]
}

fn score_labels(body: &[u8], opts: &StubOptions) -> Result<Vec<u8>, BackendError> {
    let req = parse::<WireLabelRequest>(body)?.into_request()?;
    if !opts.supports_label_scoring {
        return Err(BackendError::Capability("label scoring unsupported".into()));
    }
    Ok(to_body(&WireLabelResponse::new(
        req.request_id,
        &stub_label_scores(&req.labels),
    )))
}

/// FNV-1a (64-bit) of the label, reduced to a score in [0, 1).
pub fn label_hash_score(label: &str) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % 1_000_000) as f64 / 1e6
}

/// Scores descending; ties broken by label.
pub fn stub_label_scores(labels: &[String]) -> Vec<LabelScore> {
    let mut out: Vec<LabelScore> = labels
        .iter()
        .map(|l| LabelScore {
            label: l.clone(),
            score: label_hash_score(l),
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.label.cmp(&b.label)));
    out
}
