//! Protocol conformance suite run against a live endpoint.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use image::{Rgb, RgbImage};
use serde::Serialize;

use super::remote::{status_error, HttpClient};
use super::wire::{
    from_body, to_body, WireError, WireLabelRequest, WireLabelResponse, WireSegmentRequest,
    WireSegmentResponse, INFO_PATH, SCORE_LABELS_PATH, SEGMENT_PATH,
};
use super::{
    BackendError, LabelRequest, Polarity, PromptBox, SegmentRequest, SegmenterCapabilities,
};
use crate::data_ingest::BoxPx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckOutcome {
    Pass,
    Fail,
    /// The endpoint did not advertise the capability under test.
    Unsupported,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub outcome: CheckOutcome,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConformanceReport {
    pub endpoint: String,
    pub capabilities: Option<SegmenterCapabilities>,
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.outcome != CheckOutcome::Fail)
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "protocol check against {}", self.endpoint)?;
        for c in &self.checks {
            let tag = match c.outcome {
                CheckOutcome::Pass => "PASS",
                CheckOutcome::Fail => "FAIL",
                CheckOutcome::Unsupported => "UNSUPPORTED",
            };
            writeln!(f, "  {tag:<11}  {:<18} {}", c.name, c.detail)?;
        }
        let failed = self.checks.iter().filter(|c| c.outcome == CheckOutcome::Fail).count();
        write!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

fn probe_image() -> RgbImage {
    RgbImage::from_fn(64, 48, |x, y| Rgb([(x * 4) as u8, (y * 5) as u8, 128]))
}

fn probe_request(id: &str, boxes: Vec<PromptBox>, text: Option<&str>, max_masks: usize) -> SegmentRequest {
    SegmentRequest {
        request_id: id.to_string(),
        image: Arc::new(probe_image()),
        boxes,
        text: text.map(str::to_string),
        max_masks,
    }
}

fn positive() -> PromptBox {
    PromptBox { rect: BoxPx::new(8, 8, 40, 32), polarity: Polarity::Positive }
}

fn negative() -> PromptBox {
    PromptBox { rect: BoxPx::new(44, 30, 60, 44), polarity: Polarity::Negative }
}

/// Runs every check. Fails outright only when `/v1/info` is unreachable.
pub fn protocol_check(endpoint: &str, timeout: Duration) -> Result<ConformanceReport, BackendError> {
    let http = HttpClient::new(endpoint, timeout);
    let mut checks = Vec::new();
    let (status, body) = http.get(INFO_PATH)?;
    let caps = if status != 200 {
        checks.push(fail("info", status_error(status, &body).to_string()));
        None
    } else {
        match from_body::<SegmenterCapabilities>(&body) {
            Ok(c) => {
                checks.push(pass("info", format!("model {}", c.model_name)));
                Some(c)
            }
            Err(e) => {
                checks.push(fail("info", e.to_string()));
                None
            }
        }
    };
    let caps = caps.unwrap_or(SegmenterCapabilities {
        model_name: String::new(),
        supports_text: false,
        supports_negative_boxes: false,
        supports_label_scoring: false,
    });

    checks.push(run_segment(&http, "segment", probe_request("pc-segment", vec![positive()], None, 32)));
    checks.push(run_segment(&http, "segment_max_masks", probe_request("pc-max1", vec![positive()], None, 1)));
    checks.push(if caps.supports_negative_boxes {
        run_segment(
            &http,
            "segment_negative",
            probe_request("pc-negative", vec![positive(), negative()], None, 32),
        )
    } else {
        unsupported("segment_negative")
    });
    checks.push(if caps.supports_text {
        run_segment(&http, "segment_text", probe_request("pc-text", vec![], Some("object"), 32))
    } else {
        unsupported("segment_text")
    });
    checks.push(if caps.supports_label_scoring {
        run_labels(&http)
    } else {
        unsupported("score_labels")
    });
    checks.push(run_malformed(&http));

    Ok(ConformanceReport {
        endpoint: http.endpoint().to_string(),
        capabilities: (status == 200 && !caps.model_name.is_empty()).then_some(caps),
        checks,
    })
}

fn pass(name: &str, detail: String) -> CheckResult {
    CheckResult { name: name.into(), outcome: CheckOutcome::Pass, detail }
}

fn fail(name: &str, detail: String) -> CheckResult {
    CheckResult { name: name.into(), outcome: CheckOutcome::Fail, detail }
}

fn unsupported(name: &str) -> CheckResult {
    CheckResult {
        name: name.into(),
        outcome: CheckOutcome::Unsupported,
        detail: "not advertised".into(),
    }
}

fn post_ok(http: &HttpClient, path: &str, body: &[u8]) -> Result<Vec<u8>, BackendError> {
    let (status, resp) = http.post(path, body)?;
    if status != 200 {
        return Err(status_error(status, &resp));
    }
    Ok(resp)
}

fn run_segment(http: &HttpClient, name: &str, req: SegmentRequest) -> CheckResult {
    let body = to_body(&WireSegmentRequest::from_request(&req));
    let outcome = post_ok(http, SEGMENT_PATH, &body).and_then(|resp| {
        let parsed: WireSegmentResponse = from_body(&resp)?;
        let descending = parsed.masks.windows(2).all(|w| w[0].score >= w[1].score);
        let masks = parsed.into_masks(&req)?;
        if !descending {
            return Err(BackendError::Protocol("masks not sorted by descending score".into()));
        }
        Ok(masks.len())
    });
    match outcome {
        Ok(n) => pass(name, format!("{n} mask(s)")),
        Err(e) => fail(name, e.to_string()),
    }
}

fn run_labels(http: &HttpClient) -> CheckResult {
    let req = LabelRequest {
        request_id: "pc-labels".into(),
        image: Arc::new(probe_image()),
        rect: positive().rect,
        labels: vec!["cat".into(), "dog".into(), "bus".into()],
    };
    let body = to_body(&WireLabelRequest::from_request(&req));
    let outcome = post_ok(http, SCORE_LABELS_PATH, &body).and_then(|resp| {
        let parsed: WireLabelResponse = from_body(&resp)?;
        if !parsed.scores.windows(2).all(|w| w[0].score >= w[1].score) {
            return Err(BackendError::Protocol("scores not in descending order".into()));
        }
        parsed.into_scores(&req)
    });
    match outcome {
        Ok(s) => pass("score_labels", format!("top label {}", s[0].label)),
        Err(e) => fail("score_labels", e.to_string()),
    }
}

fn run_malformed(http: &HttpClient) -> CheckResult {
    let name = "malformed_request";
    match http.post(SEGMENT_PATH, br#"{"request_id": 1}"#) {
        Ok((400, body)) => match serde_json::from_slice::<WireError>(&body) {
            Ok(_) => pass(name, "rejected with 400".into()),
            Err(e) => fail(name, format!("400 body is not an error object: {e}")),
        },
        Ok((status, _)) => fail(name, format!("expected HTTP 400, got {status}")),
        Err(e) => fail(name, e.to_string()),
    }
}
