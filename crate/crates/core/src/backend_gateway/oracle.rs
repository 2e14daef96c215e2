//! Ground-truth test double.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    check_capabilities, sort_by_score, BackendError, LabelRequest, LabelScore, ScoredMask,
    SegmentRequest, Segmenter, SegmenterCapabilities,
};
use crate::data_ingest::{encode_rle, BitGrid, MaskRle};

pub const ORACLE_SCORE: f64 = 0.95;

/// How the oracle reacts to requests carrying negative boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum NegativeMode {
    IgnoreNegatives,
    /// Any negative box wipes out the prediction.
    SuppressAll,
    /// Each negative box erodes every mask by `px_per_negative` pixels.
    Attenuate { px_per_negative: u32 },
}

#[derive(Debug, Clone, Default)]
pub struct OracleEntry {
    pub masks: Vec<ScoredMask>,
    /// True class name, used to answer label scoring.
    pub label: Option<String>,
}

/// Request id → answer table, filled by the caller before each request.
#[derive(Debug, Default)]
pub struct OracleRegistry {
    entries: Mutex<HashMap<String, OracleEntry>>,
}

impl OracleRegistry {
    pub fn insert(&self, request_id: impl Into<String>, entry: OracleEntry) {
        self.entries
            .lock()
            .expect("registry lock")
            .insert(request_id.into(), entry);
    }

    pub fn remove(&self, request_id: &str) -> Option<OracleEntry> {
        self.entries.lock().expect("registry lock").remove(request_id)
    }

    fn get(&self, request_id: &str) -> Result<OracleEntry, BackendError> {
        self.entries
            .lock()
            .expect("registry lock")
            .get(request_id)
            .cloned()
            .ok_or_else(|| BackendError::Registry(format!("unknown request id {request_id}")))
    }
}

pub struct OracleBackend {
    caps: SegmenterCapabilities,
    mode: NegativeMode,
    registry: OracleRegistry,
}

impl OracleBackend {
    pub fn new(mode: NegativeMode) -> Self {
        let model_name = match mode {
            NegativeMode::IgnoreNegatives => "mock:perfect".to_string(),
            NegativeMode::SuppressAll => "mock:suppress".to_string(),
            NegativeMode::Attenuate { px_per_negative } => {
                format!("mock:attenuate:{px_per_negative}")
            }
        };
        Self {
            caps: SegmenterCapabilities {
                model_name,
                supports_text: true,
                supports_negative_boxes: true,
                supports_label_scoring: true,
            },
            mode,
            registry: OracleRegistry::default(),
        }
    }

    pub fn mode(&self) -> NegativeMode {
        self.mode
    }

    pub fn registry(&self) -> &OracleRegistry {
        &self.registry
    }
}

impl Segmenter for OracleBackend {
    fn capabilities(&self) -> &SegmenterCapabilities {
        &self.caps
    }

    fn segment(&self, request: &SegmentRequest) -> Result<Vec<ScoredMask>, BackendError> {
        request.validate()?;
        check_capabilities(&self.caps, request)?;
        let entry = self.registry.get(&request.request_id)?;
        let negatives = request.negative_count();
        let mut masks = match (negatives, self.mode) {
            (0, _) | (_, NegativeMode::IgnoreNegatives) => entry.masks,
            (_, NegativeMode::SuppressAll) => Vec::new(),
            (n, NegativeMode::Attenuate { px_per_negative }) => entry
                .masks
                .into_iter()
                .map(|m| ScoredMask {
                    mask: encode_rle(&erode(&m.mask.decode(), px_per_negative * n as u32)),
                    score: m.score,
                })
                .collect(),
        };
        sort_by_score(&mut masks);
        masks.truncate(request.max_masks);
        Ok(masks)
    }

    fn score_labels(&self, request: &LabelRequest) -> Result<Vec<LabelScore>, BackendError> {
        if request.labels.is_empty() {
            return Err(BackendError::InvalidRequest("empty label list".into()));
        }
        let entry = self.registry.get(&request.request_id)?;
        let truth = entry.label.ok_or_else(|| {
            BackendError::Registry(format!("no label registered for {}", request.request_id))
        })?;
        let mut scores: Vec<LabelScore> = request
            .labels
            .iter()
            .map(|l| LabelScore {
                label: l.clone(),
                score: if *l == truth { 1.0 } else { 0.0 },
            })
            .collect();
        scores.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(scores)
    }

    fn oracle_registry(&self) -> Option<&OracleRegistry> {
        Some(&self.registry)
    }
}

/// Binary erosion with a `(2r+1)²` square; pixels outside the grid count as
/// background.
pub fn erode(grid: &BitGrid, radius: u32) -> BitGrid {
    if radius == 0 {
        return grid.clone();
    }
    let (h, w) = (grid.height() as i64, grid.width() as i64);
    let r = radius as i64;
    // horizontal pass: prefix counts of foreground per row
    let mut horiz = BitGrid::new(grid.height(), grid.width());
    let mut prefix = vec![0i64; w as usize + 1];
    for row in 0..h {
        for col in 0..w {
            prefix[col as usize + 1] = prefix[col as usize] + grid.get(row as u32, col as u32) as i64;
        }
        for col in 0..w {
            let (a, b) = (col - r, col + r);
            if a >= 0 && b < w && prefix[b as usize + 1] - prefix[a as usize] == 2 * r + 1 {
                horiz.set(row as u32, col as u32, true);
            }
        }
    }
    let mut out = BitGrid::new(grid.height(), grid.width());
    let mut prefix = vec![0i64; h as usize + 1];
    for col in 0..w {
        for row in 0..h {
            prefix[row as usize + 1] = prefix[row as usize] + horiz.get(row as u32, col as u32) as i64;
        }
        for row in 0..h {
            let (a, b) = (row - r, row + r);
            if a >= 0 && b < h && prefix[b as usize + 1] - prefix[a as usize] == 2 * r + 1 {
                out.set(row as u32, col as u32, true);
            }
        }
    }
    out
}

/// Convenience for tests: a registry entry answering with one mask.
pub fn single_mask_entry(mask: MaskRle, label: Option<String>) -> OracleEntry {
    OracleEntry {
        masks: vec![ScoredMask {
            mask,
            score: ORACLE_SCORE,
        }],
        label,
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use image::RgbImage;

    use super::*;
    use crate::backend_gateway::{Polarity, PromptBox};
    use crate::data_ingest::BoxPx;

    fn square(n: u32, b: BoxPx) -> MaskRle {
        let mut g = BitGrid::new(n, n);
        g.fill_box(&b, true);
        encode_rle(&g)
    }

    fn request(negatives: usize) -> SegmentRequest {
        let mut boxes = vec![PromptBox { rect: BoxPx::new(0, 0, 4, 4), polarity: Polarity::Positive }];
        for i in 0..negatives as u32 {
            boxes.push(PromptBox { rect: BoxPx::new(i, 10, i + 2, 12), polarity: Polarity::Negative });
        }
        SegmentRequest {
            request_id: "ep0".into(),
            image: Arc::new(RgbImage::new(20, 20)),
            boxes,
            text: None,
            max_masks: 32,
        }
    }

    fn backend(mode: NegativeMode) -> OracleBackend {
        let b = OracleBackend::new(mode);
        b.registry().insert(
            "ep0",
            single_mask_entry(square(20, BoxPx::new(4, 4, 16, 16)), Some("cat".into())),
        );
        b
    }

    #[test]
    fn returns_registered_mask() {
        let b = backend(NegativeMode::IgnoreNegatives);
        let out = b.segment(&request(0)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.95);
        assert_eq!(out[0].mask.area(), 144);
        assert_eq!(b.segment(&request(3)).unwrap(), out);
    }

    #[test]
    fn suppress_mode_collapses() {
        let b = backend(NegativeMode::SuppressAll);
        assert_eq!(b.segment(&request(0)).unwrap().len(), 1);
        assert!(b.segment(&request(1)).unwrap().is_empty());
    }

    #[test]
    fn attenuate_mode_erodes_per_negative() {
        let b = backend(NegativeMode::Attenuate { px_per_negative: 2 });
        assert_eq!(b.segment(&request(1)).unwrap()[0].mask.area(), 8 * 8);
        assert_eq!(b.segment(&request(2)).unwrap()[0].mask.area(), 4 * 4);
    }

    #[test]
    fn unknown_id_is_registry_error() {
        let b = OracleBackend::new(NegativeMode::IgnoreNegatives);
        assert!(matches!(b.segment(&request(0)), Err(BackendError::Registry(_))));
    }

    #[test]
    fn max_masks_truncates() {
        let b = OracleBackend::new(NegativeMode::IgnoreNegatives);
        let mut entry = single_mask_entry(square(20, BoxPx::new(0, 0, 2, 2)), None);
        entry.masks.push(ScoredMask { mask: square(20, BoxPx::new(5, 5, 9, 9)), score: 0.99 });
        b.registry().insert("ep0", entry);
        let mut req = request(0);
        req.max_masks = 1;
        let out = b.segment(&req).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.99);
    }

    #[test]
    fn label_scoring_ranks_truth_first() {
        let b = backend(NegativeMode::IgnoreNegatives);
        let req = LabelRequest {
            request_id: "ep0".into(),
            image: Arc::new(RgbImage::new(20, 20)),
            rect: BoxPx::new(0, 0, 4, 4),
            labels: vec!["dog".into(), "cat".into(), "bus".into()],
        };
        let scores = b.score_labels(&req).unwrap();
        assert_eq!(scores[0], LabelScore { label: "cat".into(), score: 1.0 });
        assert_eq!(scores.len(), 3);
    }

    #[test]
    fn erosion_matches_brute_force() {
        let g = BitGrid::from_fn(15, 17, |r, c| (r * 7 + c * 3) % 5 != 0 || (r > 3 && r < 12));
        for radius in 0..4u32 {
            let want = BitGrid::from_fn(15, 17, |r, c| {
                let r = r as i64;
                let c = c as i64;
                let rad = radius as i64;
                (r - rad..=r + rad).all(|rr| {
                    (c - rad..=c + rad).all(|cc| {
                        rr >= 0 && cc >= 0 && rr < 15 && cc < 17 && g.get(rr as u32, cc as u32)
                    })
                })
            });
            assert_eq!(erode(&g, radius), want, "radius {radius}");
        }
    }
}
