//! The segmenter capability contract, mock backends, and the HTTP client for
//! a remote segmentation bridge.

mod conformance;
mod oracle;
mod remote;
pub mod stub;
pub mod wire;

use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_ingest::{encode_rle, BitGrid, BoxPx, MaskRle};

pub use conformance::{protocol_check, CheckOutcome, CheckResult, ConformanceReport};
pub use oracle::{
    erode, single_mask_entry, NegativeMode, OracleBackend, OracleEntry, OracleRegistry, ORACLE_SCORE,
};
pub use remote::{status_error, HttpClient, RemoteOptions, RemoteSegmenter, RetryPolicy};

/// Score cutoff for keeping a returned mask in the merged prediction.
pub const MERGE_SCORE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MAX_MASKS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Network failure, timeout, or model not loaded. Retryable.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    /// The backend answered with something that violates the protocol.
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("registry error: {0}")]
    Registry(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBox {
    pub rect: BoxPx,
    pub polarity: Polarity,
}

#[derive(Debug, Clone)]
pub struct SegmentRequest {
    pub request_id: String,
    pub image: Arc<RgbImage>,
    pub boxes: Vec<PromptBox>,
    pub text: Option<String>,
    pub max_masks: usize,
}

impl SegmentRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        let has_positive = self.boxes.iter().any(|b| b.polarity == Polarity::Positive);
        if !has_positive && self.text.is_none() {
            return Err(BackendError::InvalidRequest(
                "needs a positive box or a text label".into(),
            ));
        }
        let bounds = BoxPx::new(0, 0, self.image.width(), self.image.height());
        if let Some(b) = self
            .boxes
            .iter()
            .find(|b| b.rect.is_empty() || !bounds.contains(&b.rect))
        {
            return Err(BackendError::InvalidRequest(format!(
                "box {:?} is empty or outside the {}x{} image",
                b.rect,
                bounds.x1,
                bounds.y1
            )));
        }
        Ok(())
    }

    pub fn has_negatives(&self) -> bool {
        self.boxes.iter().any(|b| b.polarity == Polarity::Negative)
    }

    pub fn negative_count(&self) -> usize {
        self.boxes
            .iter()
            .filter(|b| b.polarity == Polarity::Negative)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub mask: MaskRle,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct LabelRequest {
    pub request_id: String,
    pub image: Arc<RgbImage>,
    pub rect: BoxPx,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub score: f64,
}

/// Wire shape of `GET /v1/info`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterCapabilities {
    pub model_name: String,
    pub supports_text: bool,
    pub supports_negative_boxes: bool,
    pub supports_label_scoring: bool,
}

/// A promptable segmentation backend.
pub trait Segmenter: Send + Sync {
    fn capabilities(&self) -> &SegmenterCapabilities;

    /// Returns at most `max_masks` masks at the request image size, sorted by
    /// descending score.
    fn segment(&self, request: &SegmentRequest) -> Result<Vec<ScoredMask>, BackendError>;

    /// One score per label, descending.
    fn score_labels(&self, request: &LabelRequest) -> Result<Vec<LabelScore>, BackendError>;

    /// Ground-truth registry for test doubles that answer from annotations.
    fn oracle_registry(&self) -> Option<&OracleRegistry> {
        None
    }
}

/// Default erosion per negative box for `mock:attenuate`.
pub const DEFAULT_ATTENUATE_PX: u32 = 8;

/// Opens a backend from its spec: `mock:perfect`, `mock:suppress`,
/// `mock:attenuate[:px]`, or an `http://` / `https://` endpoint.
pub fn open_backend(spec: &str, max_in_flight: usize) -> Result<Arc<dyn Segmenter>, BackendError> {
    let mock = |mode| Ok(Arc::new(OracleBackend::new(mode)) as Arc<dyn Segmenter>);
    match spec.split(':').collect::<Vec<_>>().as_slice() {
        ["mock", "perfect"] => mock(NegativeMode::IgnoreNegatives),
        ["mock", "suppress"] => mock(NegativeMode::SuppressAll),
        ["mock", "attenuate"] => mock(NegativeMode::Attenuate { px_per_negative: DEFAULT_ATTENUATE_PX }),
        ["mock", "attenuate", px] => match px.parse() {
            Ok(px_per_negative) => mock(NegativeMode::Attenuate { px_per_negative }),
            Err(_) => Err(BackendError::InvalidRequest(format!("bad erosion width in {spec:?}"))),
        },
        _ if spec.starts_with("http://") || spec.starts_with("https://") => {
            let mut opts = RemoteOptions::new(spec);
            opts.max_in_flight = max_in_flight;
            Ok(Arc::new(RemoteSegmenter::connect(opts)?))
        }
        _ => Err(BackendError::InvalidRequest(format!("unknown backend {spec:?}"))),
    }
}

/// Rejects requests that use prompt kinds the backend did not advertise.
pub fn check_capabilities(
    caps: &SegmenterCapabilities,
    request: &SegmentRequest,
) -> Result<(), BackendError> {
    if request.has_negatives() && !caps.supports_negative_boxes {
        return Err(BackendError::Capability(format!(
            "{} does not accept negative boxes",
            caps.model_name
        )));
    }
    if request.text.is_some() && !caps.supports_text {
        return Err(BackendError::Capability(format!(
            "{} does not accept text prompts",
            caps.model_name
        )));
    }
    Ok(())
}

/// Orders masks by descending score; equal scores keep their input order.
pub fn sort_by_score(masks: &mut [ScoredMask]) {
    masks.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Union of all canvas masks scoring at least [`MERGE_SCORE_THRESHOLD`],
/// restricted to `keep`.
pub fn merge_masks(
    masks: &[ScoredMask],
    canvas_size: (u32, u32),
    keep: BoxPx,
) -> Result<MaskRle, BackendError> {
    let (w, h) = canvas_size;
    let mut merged = BitGrid::new(h, w);
    for m in masks.iter().filter(|m| m.score >= MERGE_SCORE_THRESHOLD) {
        if m.mask.size() != (h, w) {
            return Err(BackendError::Protocol(format!(
                "mask size {:?} does not match canvas {h}x{w}",
                m.mask.size()
            )));
        }
        for (start, len) in m.mask.foreground_runs() {
            for idx in start..start + len {
                let col = (idx / h as u64) as u32;
                let row = (idx % h as u64) as u32;
                if col >= keep.x0 && col < keep.x1 && row >= keep.y0 && row < keep.y1 {
                    merged.set(row, col, true);
                }
            }
        }
    }
    Ok(encode_rle(&merged))
}
