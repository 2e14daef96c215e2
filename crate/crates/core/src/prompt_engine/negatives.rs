//! Negative exemplars: confidence partitioning and the scenario generators.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{aux_request_id, BoxPrompt, PromptContext, PromptError, PromptOrigin};
use crate::backend_gateway::{
    Polarity, PromptBox, ScoredMask, SegmentRequest, DEFAULT_MAX_MASKS, MERGE_SCORE_THRESHOLD,
};
use crate::canvas_geometry::to_canvas_box;
use crate::data_ingest::{BoxPx, CategoryId, InstanceAnnotation};

pub const MAX_MULTIPLE_NEGATIVES: usize = 10;
pub const BACKGROUND_AREA_FRACTION: f64 = 0.10;
pub const BACKGROUND_MAX_ATTEMPTS: usize = 50;
pub const BACKGROUND_MAX_IOU: f64 = 0.05;
const DEFAULT_CAP: usize = 10;
/// Mixed into the episode seed for background sampling.
const BACKGROUND_STREAM: u64 = 0x6261_636b_6772_6e64;

fn default_tau() -> f64 {
    MERGE_SCORE_THRESHOLD
}

fn default_cap() -> usize {
    DEFAULT_CAP
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", from = "RawScenario")]
pub enum NegativeScenario {
    #[default]
    None,
    ThresholdPartition {
        #[serde(default = "default_tau")]
        tau: f64,
        cap: usize,
    },
    BackgroundNegatives {
        #[serde(default = "default_cap")]
        cap: usize,
    },
    SemanticDistractors {
        #[serde(default = "default_cap")]
        cap: usize,
    },
    MultipleNegatives {
        cap: usize,
    },
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawScenario {
    None {},
    ThresholdPartition {
        #[serde(default = "default_tau")]
        tau: f64,
        cap: usize,
    },
    BackgroundNegatives {
        #[serde(default = "default_cap")]
        cap: usize,
    },
    SemanticDistractors {
        #[serde(default = "default_cap")]
        cap: usize,
    },
    MultipleNegatives {
        cap: usize,
    },
}

impl From<RawScenario> for NegativeScenario {
    fn from(r: RawScenario) -> Self {
        match r {
            RawScenario::None {} => NegativeScenario::None,
            RawScenario::ThresholdPartition { tau, cap } => NegativeScenario::ThresholdPartition { tau, cap },
            RawScenario::BackgroundNegatives { cap } => NegativeScenario::BackgroundNegatives { cap },
            RawScenario::SemanticDistractors { cap } => NegativeScenario::SemanticDistractors { cap },
            RawScenario::MultipleNegatives { cap } => NegativeScenario::MultipleNegatives { cap },
        }
    }
}

impl NegativeScenario {
    pub fn cap(&self) -> usize {
        match *self {
            NegativeScenario::None => 0,
            NegativeScenario::ThresholdPartition { cap, .. }
            | NegativeScenario::BackgroundNegatives { cap }
            | NegativeScenario::SemanticDistractors { cap }
            | NegativeScenario::MultipleNegatives { cap } => cap,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            NegativeScenario::ThresholdPartition { tau, .. } if !(0.0..=1.0).contains(&tau) => {
                Err(format!("tau {tau} outside [0, 1]"))
            }
            NegativeScenario::MultipleNegatives { cap } if cap > MAX_MULTIPLE_NEGATIVES => Err(
                format!("multiple_negatives cap {cap} exceeds {MAX_MULTIPLE_NEGATIVES}"),
            ),
            _ => Ok(()),
        }
    }

    /// Scenarios drawing negatives from other categories in the support image.
    pub fn needs_second_category(&self) -> bool {
        matches!(
            self,
            NegativeScenario::SemanticDistractors { .. } | NegativeScenario::MultipleNegatives { .. }
        )
    }
}

impl fmt::Display for NegativeScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NegativeScenario::None => write!(f, "none"),
            NegativeScenario::ThresholdPartition { tau, cap } => {
                write!(f, "threshold_partition(tau={tau}, cap={cap})")
            }
            NegativeScenario::BackgroundNegatives { cap } => write!(f, "background_negatives(cap={cap})"),
            NegativeScenario::SemanticDistractors { cap } => write!(f, "semantic_distractors(cap={cap})"),
            NegativeScenario::MultipleNegatives { cap } => write!(f, "multiple_negatives(cap={cap})"),
        }
    }
}

/// A scored candidate reduced to its tight box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exemplar {
    /// Position in the candidate list.
    pub index: usize,
    pub score: f64,
    pub rect: BoxPx,
}

/// Splits candidates at `tau`: scores `>= tau` are positives (input order),
/// the rest are negatives in descending score order truncated to `cap`.
/// Candidates with an empty mask have no box and are dropped.
pub fn partition_exemplars(
    candidates: &[ScoredMask],
    tau: f64,
    cap: usize,
) -> (Vec<Exemplar>, Vec<Exemplar>) {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (index, c) in candidates.iter().enumerate() {
        let Some(rect) = c.mask.bbox() else { continue };
        let ex = Exemplar { index, score: c.score, rect };
        if c.score >= tau {
            positives.push(ex);
        } else {
            negatives.push(ex);
        }
    }
    negatives.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    negatives.truncate(cap);
    (positives, negatives)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NegativeSet {
    pub negatives: Vec<BoxPrompt>,
    /// Extra positives found by the auxiliary support pass.
    pub auxiliary_positives: Vec<BoxPrompt>,
}

fn negative(rect: BoxPx, origin: PromptOrigin, support_index: usize) -> BoxPrompt {
    BoxPrompt { rect, polarity: Polarity::Negative, origin, support_index }
}

/// Negative prompts (canvas coordinates) for one episode. `reps` holds the
/// representative target instance of each support.
pub fn generate_negatives(
    scenario: &NegativeScenario,
    ctx: &PromptContext<'_>,
    reps: &[&InstanceAnnotation],
) -> Result<NegativeSet, PromptError> {
    scenario.validate().map_err(PromptError::Scenario)?;
    match *scenario {
        NegativeScenario::None => Ok(NegativeSet::default()),
        // nothing can be emitted, so the auxiliary pass is skipped entirely
        NegativeScenario::ThresholdPartition { cap: 0, .. } => Ok(NegativeSet::default()),
        NegativeScenario::ThresholdPartition { tau, cap } => threshold_partition(ctx, reps, tau, cap),
        NegativeScenario::BackgroundNegatives { cap } => background(ctx, cap),
        NegativeScenario::SemanticDistractors { cap } => distractors(ctx, cap),
        NegativeScenario::MultipleNegatives { cap } => multiple(ctx, cap),
    }
}

fn threshold_partition(
    ctx: &PromptContext<'_>,
    reps: &[&InstanceAnnotation],
    tau: f64,
    cap: usize,
) -> Result<NegativeSet, PromptError> {
    let mut candidates: Vec<ScoredMask> = Vec::new();
    let mut owner: Vec<usize> = Vec::new();
    for (k, inst) in reps.iter().enumerate() {
        let image = ctx.support_images.get(k).ok_or_else(|| {
            PromptError::Integrity(format!("support image {k} not loaded"))
        })?;
        let req = SegmentRequest {
            request_id: aux_request_id(ctx.episode.episode_id, k),
            image: image.clone(),
            boxes: vec![PromptBox { rect: inst.bbox, polarity: Polarity::Positive }],
            text: None,
            max_masks: DEFAULT_MAX_MASKS,
        };
        let masks = ctx.backend.segment(&req)?;
        owner.extend(std::iter::repeat_n(k, masks.len()));
        candidates.extend(masks);
    }
    let (pos, neg) = partition_exemplars(&candidates, tau, cap);
    let mut out = NegativeSet::default();
    for ex in pos {
        let k = owner[ex.index];
        let rect = to_canvas_box(&ex.rect, ctx.support_placement(k)?).rect;
        out.auxiliary_positives.push(BoxPrompt {
            rect,
            polarity: Polarity::Positive,
            origin: PromptOrigin::AuxiliaryPrediction,
            support_index: k,
        });
    }
    for ex in neg {
        let k = owner[ex.index];
        let rect = to_canvas_box(&ex.rect, ctx.support_placement(k)?).rect;
        out.negatives.push(negative(rect, PromptOrigin::AuxiliaryPrediction, k));
    }
    Ok(out)
}

fn non_target<'a>(ctx: &'a PromptContext<'_>, k: usize) -> Result<Vec<&'a InstanceAnnotation>, PromptError> {
    let image_id = ctx.episode.support[k].image_id;
    let others: Vec<_> = ctx
        .manifest
        .instances_in(image_id)
        .filter(|a| a.category_id != ctx.episode.target_class_id)
        .collect();
    if others.is_empty() {
        return Err(PromptError::Scenario(format!(
            "support image {image_id} has no category besides the target"
        )));
    }
    Ok(others)
}

/// Collects `(support, instance)` pairs, keeps the `cap` largest, maps them.
fn largest_first(
    ctx: &PromptContext<'_>,
    mut picked: Vec<(usize, &InstanceAnnotation)>,
    cap: usize,
) -> Result<NegativeSet, PromptError> {
    picked.sort_by(|a, b| b.1.area.cmp(&a.1.area).then(a.0.cmp(&b.0)).then(a.1.id.cmp(&b.1.id)));
    picked.truncate(cap);
    let mut out = NegativeSet::default();
    for (k, inst) in picked {
        let rect = to_canvas_box(&inst.bbox, ctx.support_placement(k)?).rect;
        out.negatives.push(negative(rect, PromptOrigin::DistractorInstance, k));
    }
    Ok(out)
}

fn distractors(ctx: &PromptContext<'_>, cap: usize) -> Result<NegativeSet, PromptError> {
    let mut picked = Vec::new();
    for k in 0..ctx.episode.support.len() {
        let others = non_target(ctx, k)?;
        let mut area: BTreeMap<CategoryId, u64> = BTreeMap::new();
        for a in &others {
            *area.entry(a.category_id).or_default() += a.area;
        }
        // ascending id order, so the first maximum wins ties
        let (&cat, _) = area
            .iter()
            .fold(None, |best: Option<(&CategoryId, &u64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            })
            .expect("non-empty");
        picked.extend(others.into_iter().filter(|a| a.category_id == cat).map(|a| (k, a)));
    }
    largest_first(ctx, picked, cap)
}

fn multiple(ctx: &PromptContext<'_>, cap: usize) -> Result<NegativeSet, PromptError> {
    let mut picked = Vec::new();
    for k in 0..ctx.episode.support.len() {
        picked.extend(non_target(ctx, k)?.into_iter().map(|a| (k, a)));
    }
    largest_first(ctx, picked, cap.min(MAX_MULTIPLE_NEGATIVES))
}

fn background(ctx: &PromptContext<'_>, cap: usize) -> Result<NegativeSet, PromptError> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.episode.seed ^ BACKGROUND_STREAM);
    let shot = ctx.episode.support.len();
    let mut out = NegativeSet::default();
    let mut sizes = Vec::with_capacity(shot);
    let mut boxes = Vec::with_capacity(shot);
    for s in &ctx.episode.support {
        let img = ctx
            .manifest
            .image(s.image_id)
            .ok_or_else(|| PromptError::Integrity(format!("image {}", s.image_id)))?;
        sizes.push((img.width, img.height));
        boxes.push(ctx.manifest.instances_in(s.image_id).map(|a| a.bbox).collect::<Vec<_>>());
    }
    // round-robin over supports, one box at a time
    for i in 0..cap {
        let k = i % shot;
        if let Some(b) = sample_background_boxes(sizes[k], &boxes[k], 1, &mut rng).pop() {
            let rect = to_canvas_box(&b, ctx.support_placement(k)?).rect;
            out.negatives.push(negative(rect, PromptOrigin::BackgroundSample, k));
        }
    }
    Ok(out)
}

/// Draws up to `count` boxes of a tenth of the image area (aspect ratio in
/// [0.5, 2]) overlapping every box in `avoid` with IoU below 0.05. Each box
/// gets at most [`BACKGROUND_MAX_ATTEMPTS`] tries.
pub fn sample_background_boxes(
    image_size: (u32, u32),
    avoid: &[BoxPx],
    count: usize,
    rng: &mut impl Rng,
) -> Vec<BoxPx> {
    let (w, h) = image_size;
    let target = BACKGROUND_AREA_FRACTION * w as f64 * h as f64;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..BACKGROUND_MAX_ATTEMPTS {
            let aspect: f64 = rng.random_range(0.5..=2.0);
            let bw = ((target * aspect).sqrt().round() as u32).clamp(1, w);
            let bh = ((target / aspect).sqrt().round() as u32).clamp(1, h);
            let x0 = rng.random_range(0..=w - bw);
            let y0 = rng.random_range(0..=h - bh);
            let cand = BoxPx::new(x0, y0, x0 + bw, y0 + bh);
            if avoid.iter().all(|a| cand.iou(a) < BACKGROUND_MAX_IOU) {
                out.push(cand);
                break;
            }
        }
    }
    out
}
