//! Box and text prompts derived from support annotations.

mod negatives;
mod text;

use std::fmt;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend_gateway::{BackendError, Polarity, PromptBox, Segmenter};
use crate::canvas_geometry::{to_canvas_box, CanvasPlan, Placement};
use crate::data_ingest::{BoxPx, DatasetManifest, Episode, FoldSpec, InstanceAnnotation};

pub use negatives::{
    generate_negatives, partition_exemplars, sample_background_boxes, Exemplar, NegativeScenario,
    NegativeSet, BACKGROUND_AREA_FRACTION, BACKGROUND_MAX_ATTEMPTS, BACKGROUND_MAX_IOU,
    MAX_MULTIPLE_NEGATIVES,
};
pub use text::{label_pool, resolve_text_label, select_text_label, TextPrompt, TextScope};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no target instances in support image {0}")]
    NoInstances(u64),
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("annotation lookup failed: {0}")]
    Integrity(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrigin {
    SupportInstance,
    AuxiliaryPrediction,
    BackgroundSample,
    DistractorInstance,
}

/// A box prompt in canvas pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxPrompt {
    #[serde(rename = "box")]
    pub rect: BoxPx,
    pub polarity: Polarity,
    pub origin: PromptOrigin,
    /// Support the box was derived from.
    pub support_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub positives: Vec<BoxPrompt>,
    pub negatives: Vec<BoxPrompt>,
    pub text: Option<TextPrompt>,
}

impl PromptBundle {
    pub fn validate(&self, canvas: BoxPx) -> Result<(), PromptError> {
        if self.positives.is_empty() {
            return Err(PromptError::Scenario("bundle has no positive prompt".into()));
        }
        let misplaced = self
            .positives
            .iter()
            .any(|p| p.polarity != Polarity::Positive)
            || self.negatives.iter().any(|p| p.polarity != Polarity::Negative);
        if misplaced {
            return Err(PromptError::Scenario("prompt polarity disagrees with its list".into()));
        }
        if let Some(p) = self
            .positives
            .iter()
            .chain(&self.negatives)
            .find(|p| p.rect.is_empty() || !canvas.contains(&p.rect))
        {
            return Err(PromptError::Scenario(format!("prompt box {:?} leaves the canvas", p.rect)));
        }
        Ok(())
    }

    /// Positives first, then negatives.
    pub fn boxes(&self) -> Vec<PromptBox> {
        self.positives
            .iter()
            .chain(&self.negatives)
            .map(|p| PromptBox { rect: p.rect, polarity: p.polarity })
            .collect()
    }
}

impl fmt::Display for PromptBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} positive, {} negative", self.positives.len(), self.negatives.len())?;
        if let Some(t) = &self.text {
            write!(f, ", text {:?}", t.label)?;
        }
        Ok(())
    }
}

/// Largest instance; ties go to the lowest id.
pub fn select_representative_instance<'a>(
    instances: &[&'a InstanceAnnotation],
) -> Option<&'a InstanceAnnotation> {
    instances
        .iter()
        .copied()
        .max_by(|a, b| a.area.cmp(&b.area).then_with(|| b.id.cmp(&a.id)))
}

pub fn positive_prompt(
    instance: &InstanceAnnotation,
    placement: &Placement,
    support_index: usize,
) -> (BoxPrompt, bool) {
    let mapped = to_canvas_box(&instance.bbox, placement);
    (
        BoxPrompt {
            rect: mapped.rect,
            polarity: Polarity::Positive,
            origin: PromptOrigin::SupportInstance,
            support_index,
        },
        mapped.clamped,
    )
}

/// Canvas segmentation request id for an episode.
pub fn canvas_request_id(episode_id: u64) -> String {
    format!("episode-{episode_id}")
}

/// Request id of the auxiliary support-only call.
pub fn aux_request_id(episode_id: u64, support_index: usize) -> String {
    format!("episode-{episode_id}-support-{support_index}")
}

pub fn label_request_id(episode_id: u64) -> String {
    format!("episode-{episode_id}-label")
}

/// Inputs shared by every prompt builder for one episode.
pub struct PromptContext<'a> {
    pub episode: &'a Episode,
    pub manifest: &'a DatasetManifest,
    pub fold: &'a FoldSpec,
    pub plan: &'a CanvasPlan,
    /// Support images in episode order, at source resolution.
    pub support_images: &'a [Arc<RgbImage>],
    pub backend: &'a dyn Segmenter,
}

impl PromptContext<'_> {
    /// Representative target instance of each support.
    pub fn representatives(&self) -> Result<Vec<&InstanceAnnotation>, PromptError> {
        self.episode
            .support
            .iter()
            .map(|s| {
                let anns = s
                    .instance_ids
                    .iter()
                    .map(|&id| {
                        self.manifest
                            .annotation(id)
                            .ok_or_else(|| PromptError::Integrity(format!("annotation {id}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                select_representative_instance(&anns).ok_or(PromptError::NoInstances(s.image_id))
            })
            .collect()
    }

    pub fn support_placement(&self, k: usize) -> Result<&Placement, PromptError> {
        self.plan
            .support(k)
            .ok_or_else(|| PromptError::Integrity(format!("plan has no support {k}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuiltPrompts {
    pub bundle: PromptBundle,
    pub warnings: Vec<String>,
}

/// Positives from representative instances, negatives per scenario, and an
/// optional text label.
pub fn build_prompts(
    ctx: &PromptContext<'_>,
    scenario: &NegativeScenario,
    text_scope: Option<TextScope>,
) -> Result<BuiltPrompts, PromptError> {
    let mut warnings = Vec::new();
    let reps = ctx.representatives()?;
    let mut positives = Vec::with_capacity(reps.len());
    for (k, inst) in reps.iter().enumerate() {
        let (p, clamped) = positive_prompt(inst, ctx.support_placement(k)?, k);
        if clamped {
            warnings.push(format!("support {k} positive box clamped"));
        }
        positives.push(p);
    }
    let negative_set = generate_negatives(scenario, ctx, &reps)?;
    positives.extend(negative_set.auxiliary_positives);
    let text = match text_scope {
        None => None,
        Some(scope) => {
            let (t, warn) = resolve_text_label(ctx, scope, &reps[0].bbox)?;
            warnings.extend(warn);
            Some(t)
        }
    };
    let bundle = PromptBundle {
        positives,
        negatives: negative_set.negatives,
        text,
    };
    bundle.validate(ctx.plan.canvas_rect())?;
    Ok(BuiltPrompts { bundle, warnings })
}
