//! JSON shapes of the HTTP protocol spoken with a remote segmenter.
//!
//! Field order in these structs is the serialization order. Bodies are
//! compact JSON; scores carry at most six significant digits.

use std::io::Cursor;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{
    BackendError, LabelRequest, LabelScore, Polarity, PromptBox, ScoredMask, SegmentRequest,
};
use crate::data_ingest::{BoxPx, MaskRle};

pub const INFO_PATH: &str = "/v1/info";
pub const SEGMENT_PATH: &str = "/v1/segment";
pub const SCORE_LABELS_PATH: &str = "/v1/score_labels";

/// Rounds to six significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn ser_score<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig6(*x))
}

fn de_score<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let x = f64::deserialize(d)?;
    if !(0.0..=1.0).contains(&x) {
        return Err(serde::de::Error::custom(format!("score {x} outside [0, 1]")));
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl From<BoxPx> for WireRect {
    fn from(b: BoxPx) -> Self {
        Self { x0: b.x0, y0: b.y0, x1: b.x1, y1: b.y1 }
    }
}

impl From<WireRect> for BoxPx {
    fn from(r: WireRect) -> Self {
        BoxPx::new(r.x0, r.y0, r.x1, r.y1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireSegmentRequest {
    pub request_id: String,
    pub image_png_b64: String,
    pub boxes: Vec<WireBox>,
    pub text: Option<String>,
    pub max_masks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireMask {
    pub size: [u32; 2],
    pub counts: Vec<u32>,
    #[serde(serialize_with = "ser_score", deserialize_with = "de_score")]
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireSegmentResponse {
    pub request_id: String,
    pub masks: Vec<WireMask>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireLabelRequest {
    pub request_id: String,
    pub image_png_b64: String,
    #[serde(rename = "box")]
    pub rect: WireRect,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireLabelScore {
    pub label: String,
    #[serde(serialize_with = "ser_score", deserialize_with = "de_score")]
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireLabelResponse {
    pub request_id: String,
    pub scores: Vec<WireLabelScore>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub error: String,
}

/// Compact JSON body.
pub fn to_body<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("wire types always serialize")
}

pub fn from_body<'a, T: Deserialize<'a>>(body: &'a [u8]) -> Result<T, BackendError> {
    serde_json::from_slice(body).map_err(|e| BackendError::Protocol(e.to_string()))
}

pub fn encode_png_b64(image: &RgbImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    STANDARD.encode(buf.into_inner())
}

pub fn decode_png_b64(data: &str) -> Result<RgbImage, BackendError> {
    let bytes = STANDARD
        .decode(data)
        .map_err(|e| BackendError::InvalidRequest(format!("image is not base64: {e}")))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| BackendError::InvalidRequest(format!("image is not a PNG: {e}")))?;
    Ok(img.to_rgb8())
}

impl WireSegmentRequest {
    pub fn from_request(req: &SegmentRequest) -> Self {
        Self {
            request_id: req.request_id.clone(),
            image_png_b64: encode_png_b64(&req.image),
            boxes: req
                .boxes
                .iter()
                .map(|b| WireBox {
                    x0: b.rect.x0,
                    y0: b.rect.y0,
                    x1: b.rect.x1,
                    y1: b.rect.y1,
                    polarity: b.polarity,
                })
                .collect(),
            text: req.text.clone(),
            max_masks: req.max_masks,
        }
    }

    /// Decodes the image and checks the request invariants.
    pub fn into_request(self) -> Result<SegmentRequest, BackendError> {
        let image = decode_png_b64(&self.image_png_b64)?;
        let req = SegmentRequest {
            request_id: self.request_id,
            image: Arc::new(image),
            boxes: self
                .boxes
                .into_iter()
                .map(|b| PromptBox {
                    rect: BoxPx::new(b.x0, b.y0, b.x1, b.y1),
                    polarity: b.polarity,
                })
                .collect(),
            text: self.text,
            max_masks: self.max_masks,
        };
        req.validate()?;
        Ok(req)
    }
}

impl WireMask {
    pub fn from_scored(m: &ScoredMask) -> Self {
        let (h, w) = m.mask.size();
        Self {
            size: [h, w],
            counts: m.mask.counts().to_vec(),
            score: m.score,
        }
    }
}

impl WireSegmentResponse {
    pub fn new(request_id: impl Into<String>, masks: &[ScoredMask]) -> Self {
        Self {
            request_id: request_id.into(),
            masks: masks.iter().map(WireMask::from_scored).collect(),
        }
    }

    /// Checks id correlation, mask sizes and mask count, then returns masks in
    /// descending score order.
    pub fn into_masks(self, req: &SegmentRequest) -> Result<Vec<ScoredMask>, BackendError> {
        if self.request_id != req.request_id {
            return Err(BackendError::Protocol(format!(
                "response id {} does not match request {}",
                self.request_id, req.request_id
            )));
        }
        if self.masks.len() > req.max_masks {
            return Err(BackendError::Protocol(format!(
                "{} masks returned, max_masks was {}",
                self.masks.len(),
                req.max_masks
            )));
        }
        let want = (req.image.height(), req.image.width());
        let mut out = Vec::with_capacity(self.masks.len());
        for (i, m) in self.masks.into_iter().enumerate() {
            let [h, w] = m.size;
            if (h, w) != want {
                return Err(BackendError::Protocol(format!(
                    "mask {i} is {h}x{w}, request image is {}x{}",
                    want.0, want.1
                )));
            }
            let mask = MaskRle::new(h, w, m.counts)
                .map_err(|e| BackendError::Protocol(format!("mask {i}: {e}")))?;
            out.push(ScoredMask { mask, score: m.score });
        }
        super::sort_by_score(&mut out);
        Ok(out)
    }
}

impl WireLabelRequest {
    pub fn from_request(req: &LabelRequest) -> Self {
        Self {
            request_id: req.request_id.clone(),
            image_png_b64: encode_png_b64(&req.image),
            rect: req.rect.into(),
            labels: req.labels.clone(),
        }
    }

    pub fn into_request(self) -> Result<LabelRequest, BackendError> {
        let image = decode_png_b64(&self.image_png_b64)?;
        if self.labels.is_empty() {
            return Err(BackendError::InvalidRequest("empty label list".into()));
        }
        let rect: BoxPx = self.rect.into();
        if rect.is_empty() || !BoxPx::new(0, 0, image.width(), image.height()).contains(&rect) {
            return Err(BackendError::InvalidRequest(format!(
                "box {rect:?} is empty or outside the image"
            )));
        }
        Ok(LabelRequest {
            request_id: self.request_id,
            image: Arc::new(image),
            rect,
            labels: self.labels,
        })
    }
}

impl WireLabelResponse {
    pub fn new(request_id: impl Into<String>, scores: &[LabelScore]) -> Self {
        Self {
            request_id: request_id.into(),
            scores: scores
                .iter()
                .map(|s| WireLabelScore { label: s.label.clone(), score: s.score })
                .collect(),
        }
    }

    /// Requires exactly one score per requested label.
    pub fn into_scores(self, req: &LabelRequest) -> Result<Vec<LabelScore>, BackendError> {
        if self.request_id != req.request_id {
            return Err(BackendError::Protocol(format!(
                "response id {} does not match request {}",
                self.request_id, req.request_id
            )));
        }
        let mut got: Vec<&str> = self.scores.iter().map(|s| s.label.as_str()).collect();
        let mut want: Vec<&str> = req.labels.iter().map(String::as_str).collect();
        got.sort_unstable();
        want.sort_unstable();
        if got != want {
            return Err(BackendError::Protocol(
                "score labels do not match the requested labels".into(),
            ));
        }
        let mut out: Vec<LabelScore> = self
            .scores
            .into_iter()
            .map(|s| LabelScore { label: s.label, score: s.score })
            .collect();
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(round_sig6(0.123456789), 0.123457);
        assert_eq!(round_sig6(0.9), 0.9);
        assert_eq!(round_sig6(1.0), 1.0);
        assert_eq!(round_sig6(0.0), 0.0);
        let m = WireMask { size: [1, 1], counts: vec![1], score: 0.987654321 };
        assert_eq!(
            String::from_utf8(to_body(&m)).unwrap(),
            r#"{"size":[1,1],"counts":[1],"score":0.987654}"#
        );
    }

    #[test]
    fn score_range_enforced() {
        let r: Result<WireMask, _> = serde_json::from_str(r#"{"size":[1,1],"counts":[1],"score":1.5}"#);
        assert!(r.is_err());
    }

    #[test]
    fn png_round_trip() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8 * 40, y as u8 * 70, 9]));
        let back = decode_png_b64(&encode_png_b64(&img)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn null_text_is_serialized() {
        let req = WireSegmentRequest {
            request_id: "a".into(),
            image_png_b64: "AA==".into(),
            boxes: vec![],
            text: None,
            max_masks: 1,
        };
        assert_eq!(
            String::from_utf8(to_body(&req)).unwrap(),
            r#"{"request_id":"a","image_png_b64":"AA==","boxes":[],"text":null,"max_masks":1}"#
        );
    }

    #[test]
    fn response_validation() {
        let req = SegmentRequest {
            request_id: "r".into(),
            image: Arc::new(RgbImage::new(2, 2)),
            boxes: vec![],
            text: Some("x".into()),
            max_masks: 2,
        };
        let ok = WireSegmentResponse {
            request_id: "r".into(),
            masks: vec![
                WireMask { size: [2, 2], counts: vec![4], score: 0.2 },
                WireMask { size: [2, 2], counts: vec![0, 4], score: 0.7 },
            ],
        };
        let masks = ok.clone().into_masks(&req).unwrap();
        assert_eq!(masks[0].score, 0.7);
        let mut wrong_id = ok.clone();
        wrong_id.request_id = "q".into();
        assert!(wrong_id.into_masks(&req).is_err());
        let mut wrong_size = ok.clone();
        wrong_size.masks[0].size = [3, 2];
        assert!(wrong_size.into_masks(&req).is_err());
        let mut bad_rle = ok;
        bad_rle.masks[0].counts = vec![1, 0, 3];
        assert!(bad_rle.into_masks(&req).is_err());
    }
}
