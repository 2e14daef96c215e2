//! Per-episode pixel counts and the aggregated mIoU / FB-IoU accumulators.
//!
//! Class IoU is Σ intersection / Σ union over a class's episodes; FB-IoU pools
//! the foreground/background confusion counts over every episode before
//! averaging the two IoUs. The mean of per-episode IoUs is tracked alongside
//! for comparison with papers that average per episode.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_ingest::{CategoryId, MaskRle};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("prediction is {pred:?} but ground truth is {gt:?}")]
    SizeMismatch { pred: (u32, u32), gt: (u32, u32) },
    #[error("class {0} has zero union (no episodes or empty masks)")]
    ZeroUnion(CategoryId),
    #[error("FB-IoU undefined: {0} union is zero over the whole run")]
    DegenerateFb(&'static str),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub intersection: u64,
    pub union: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl PixelCounts {
    pub fn from_confusion(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self {
            intersection: tp,
            union: tp + fp + fn_,
            tp,
            fp,
            fn_,
            tn,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Foreground IoU; `None` when both masks are empty.
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

/// Exact pixel tallies computed by walking both run lists together.
pub fn episode_counts(pred: &MaskRle, gt: &MaskRle) -> Result<PixelCounts, MetricError> {
    if pred.size() != gt.size() {
        return Err(MetricError::SizeMismatch {
            pred: pred.size(),
            gt: gt.size(),
        });
    }
    let total = pred.height() as u64 * pred.width() as u64;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);

    let mut a = pred.counts().iter().map(|&c| c as u64);
    let mut b = gt.counts().iter().map(|&c| c as u64);
    let (mut ra, mut rb) = (a.next().unwrap_or(0), b.next().unwrap_or(0));
    let (mut va, mut vb) = (false, false);
    let mut pos = 0u64;
    while pos < total {
        while ra == 0 {
            ra = a.next().unwrap_or(u64::MAX);
            va = !va;
        }
        while rb == 0 {
            rb = b.next().unwrap_or(u64::MAX);
            vb = !vb;
        }
        let step = ra.min(rb).min(total - pos);
        match (va, vb) {
            (true, true) => tp += step,
            (true, false) => fp += step,
            (false, true) => fn_ += step,
            (false, false) => {}
        }
        ra -= step;
        rb -= step;
        pos += step;
    }
    let tn = total - tp - fp - fn_;
    Ok(PixelCounts::from_confusion(tp, fp, fn_, tn))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassSums {
    pub intersection: u64,
    pub union: u64,
    /// Per-episode IoUs, kept so the per-episode mean is order independent.
    pub episode_ious: Vec<f64>,
}

impl ClassSums {
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }

    pub fn episodes(&self) -> usize {
        self.episode_ious.len()
    }

    fn mean_episode_iou(&self) -> Option<f64> {
        if self.episode_ious.is_empty() {
            return None;
        }
        let mut v = self.episode_ious.clone();
        v.sort_by(f64::total_cmp);
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAccumulator {
    classes: BTreeMap<CategoryId, ClassSums>,
}

impl ClassAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class_id: CategoryId, counts: &PixelCounts) {
        let sums = self.classes.entry(class_id).or_default();
        sums.intersection += counts.intersection;
        sums.union += counts.union;
        // an episode where both masks are empty counts as a perfect match
        sums.episode_ious.push(counts.iou().unwrap_or(1.0));
    }

    pub fn merge(&mut self, other: &ClassAccumulator) {
        for (id, s) in &other.classes {
            let sums = self.classes.entry(*id).or_default();
            sums.intersection += s.intersection;
            sums.union += s.union;
            sums.episode_ious.extend_from_slice(&s.episode_ious);
        }
    }

    pub fn class(&self, class_id: CategoryId) -> Option<&ClassSums> {
        self.classes.get(&class_id)
    }

    pub fn classes(&self) -> impl Iterator<Item = (CategoryId, &ClassSums)> {
        self.classes.iter().map(|(&k, v)| (k, v))
    }
}

/// Mean over `fold_classes` of each class's aggregated IoU.
pub fn miou(acc: &ClassAccumulator, fold_classes: &[CategoryId]) -> Result<f64, MetricError> {
    let mut total = 0.0;
    for &class_id in fold_classes {
        let iou = acc
            .class(class_id)
            .and_then(ClassSums::iou)
            .ok_or(MetricError::ZeroUnion(class_id))?;
        total += iou;
    }
    Ok(total / fold_classes.len() as f64)
}

/// Mean over `fold_classes` of each class's mean per-episode IoU.
pub fn miou_per_episode_mean(
    acc: &ClassAccumulator,
    fold_classes: &[CategoryId],
) -> Result<f64, MetricError> {
    let mut total = 0.0;
    for &class_id in fold_classes {
        total += acc
            .class(class_id)
            .and_then(ClassSums::mean_episode_iou)
            .ok_or(MetricError::ZeroUnion(class_id))?;
    }
    Ok(total / fold_classes.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FbAccumulator {
    pub fg_tp: u64,
    pub fg_fp: u64,
    pub fg_fn: u64,
    pub bg_tp: u64,
    pub bg_fp: u64,
    pub bg_fn: u64,
}

impl FbAccumulator {
    pub fn add(&mut self, c: &PixelCounts) {
        self.fg_tp += c.tp;
        self.fg_fp += c.fp;
        self.fg_fn += c.fn_;
        // background: predicted-bg & gt-bg is a hit, predicted-bg & gt-fg a
        // false positive for the background class
        self.bg_tp += c.tn;
        self.bg_fp += c.fn_;
        self.bg_fn += c.fp;
    }

    pub fn merge(&mut self, o: &FbAccumulator) {
        self.fg_tp += o.fg_tp;
        self.fg_fp += o.fg_fp;
        self.fg_fn += o.fg_fn;
        self.bg_tp += o.bg_tp;
        self.bg_fp += o.bg_fp;
        self.bg_fn += o.bg_fn;
    }
}

/// `(IoU_fg + IoU_bg) / 2` over pooled counts.
pub fn fb_iou(acc: &FbAccumulator) -> Result<f64, MetricError> {
    let fg_union = acc.fg_tp + acc.fg_fp + acc.fg_fn;
    let bg_union = acc.bg_tp + acc.bg_fp + acc.bg_fn;
    if fg_union == 0 {
        return Err(MetricError::DegenerateFb("foreground"));
    }
    if bg_union == 0 {
        return Err(MetricError::DegenerateFb("background"));
    }
    let fg = acc.fg_tp as f64 / fg_union as f64;
    let bg = acc.bg_tp as f64 / bg_union as f64;
    Ok((fg + bg) / 2.0)
}

/// Both accumulators for one run (or one shard of a run).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    pub classes: ClassAccumulator,
    pub fb: FbAccumulator,
    pub episodes: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, class_id: CategoryId, counts: &PixelCounts) {
        self.classes.add(class_id, counts);
        self.fb.add(counts);
        self.episodes += 1;
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.classes.merge(&other.classes);
        self.fb.merge(&other.fb);
        self.episodes += other.episodes;
    }
}

/// `variant - baseline` in percentage points, rounded to one decimal.
pub fn ablation_delta(baseline: f64, variant: f64) -> f64 {
    // + 0.0 folds a negative zero into zero
    ((variant - baseline) * 10.0).round() / 10.0 + 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_ingest::{encode_rle, BitGrid, BoxPx};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn box_mask(h: u32, w: u32, b: BoxPx) -> MaskRle {
        let mut g = BitGrid::new(h, w);
        g.fill_box(&b, true);
        encode_rle(&g)
    }

    #[test]
    fn identical_masks() {
        let m = box_mask(20, 20, BoxPx::new(0, 0, 10, 10));
        let c = episode_counts(&m, &m).unwrap();
        assert_eq!((c.intersection, c.union), (100, 100));
        assert_eq!(c.iou(), Some(1.0));
    }

    #[test]
    fn disjoint_masks() {
        let a = box_mask(20, 20, BoxPx::new(0, 0, 5, 10));
        let b = box_mask(20, 20, BoxPx::new(10, 10, 15, 20));
        let c = episode_counts(&a, &b).unwrap();
        assert_eq!((c.intersection, c.union), (0, 100));
        assert_eq!(c.iou(), Some(0.0));
        assert_eq!(c.total(), 400);
    }

    #[test]
    fn random_pairs_match_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = rng.random_range(0.0..1.0);
            let a = BitGrid::from_fn(32, 32, |_, _| rng.random_bool(p));
            let b = BitGrid::from_fn(32, 32, |_, _| rng.random_bool(0.5));
            let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
            for r in 0..32 {
                for c in 0..32 {
                    match (a.get(r, c), b.get(r, c)) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => tn += 1,
                    }
                }
            }
            let got = episode_counts(&encode_rle(&a), &encode_rle(&b)).unwrap();
            assert_eq!(got, PixelCounts::from_confusion(tp, fp, fn_, tn));
        }
    }

    #[test]
    fn size_mismatch() {
        assert!(matches!(
            episode_counts(&MaskRle::empty(2, 3), &MaskRle::empty(3, 2)),
            Err(MetricError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn miou_examples() {
        let mut acc = ClassAccumulator::new();
        acc.add(1, &PixelCounts::from_confusion(1, 1, 1, 0));
        assert!((miou(&acc, &[1]).unwrap() - 1.0 / 3.0).abs() < 1e-12);

        let mut acc = ClassAccumulator::new();
        acc.add(1, &PixelCounts::from_confusion(1, 1, 0, 0));
        acc.add(2, &PixelCounts::from_confusion(3, 0, 0, 0));
        assert_eq!(miou(&acc, &[1, 2]).unwrap(), 0.75);
        assert_eq!(miou(&acc, &[1, 2, 3]), Err(MetricError::ZeroUnion(3)));
    }

    #[test]
    fn aggregated_differs_from_per_episode_mean() {
        let mut acc = ClassAccumulator::new();
        acc.add(1, &PixelCounts::from_confusion(1, 0, 0, 9)); // IoU 1
        acc.add(1, &PixelCounts::from_confusion(0, 3, 0, 7)); // IoU 0
        assert_eq!(miou(&acc, &[1]).unwrap(), 0.25);
        assert_eq!(miou_per_episode_mean(&acc, &[1]).unwrap(), 0.5);
    }

    #[test]
    fn fb_examples() {
        let mut acc = FbAccumulator::default();
        acc.add(&PixelCounts::from_confusion(10, 0, 0, 30));
        assert_eq!(fb_iou(&acc).unwrap(), 1.0);

        // all-background prediction, 25% foreground ground truth
        let mut acc = FbAccumulator::default();
        for _ in 0..3 {
            acc.add(&PixelCounts::from_confusion(0, 0, 1, 3));
        }
        assert_eq!(fb_iou(&acc).unwrap(), 0.375);

        let mut acc = FbAccumulator::default();
        acc.add(&PixelCounts::from_confusion(0, 0, 0, 4));
        assert_eq!(fb_iou(&acc), Err(MetricError::DegenerateFb("foreground")));
    }

    #[test]
    fn deltas() {
        assert_eq!(ablation_delta(66.6, 54.8), -11.8);
        assert_eq!(ablation_delta(66.6, 66.6), 0.0);
        assert!(ablation_delta(66.6, 66.6).is_sign_positive());
        assert_eq!(ablation_delta(82.9, 72.4), -10.5);
    }
}
