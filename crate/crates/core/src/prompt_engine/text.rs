//! Text prompt selection.

use serde::{Deserialize, Serialize};

use super::{label_request_id, PromptContext, PromptError};
use crate::backend_gateway::{BackendError, LabelRequest};
use crate::data_ingest::{BoxPx, CategoryId, DatasetManifest, FoldSpec};

/// Candidate pool the text label is chosen from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextScope {
    GroundTruth,
    FoldLevel,
    DatasetLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub label: String,
    pub scope: TextScope,
    /// The backend could not score labels and the true name was used instead.
    #[serde(default)]
    pub fallback: bool,
}

pub fn label_pool(
    scope: TextScope,
    manifest: &DatasetManifest,
    fold: &FoldSpec,
    target: CategoryId,
) -> Vec<String> {
    let name = |id: CategoryId| manifest.category_name(id).unwrap_or_default().to_string();
    match scope {
        TextScope::GroundTruth => vec![name(target)],
        TextScope::FoldLevel => fold.test_class_ids.iter().map(|&id| name(id)).collect(),
        TextScope::DatasetLevel => manifest.categories().iter().map(|c| c.name.clone()).collect(),
    }
}

/// Picks the label for an episode. Non-ground-truth scopes ask the backend to
/// rank the pool against the first support image and its positive box
/// (`rect`, source pixels).
pub fn select_text_label(
    ctx: &PromptContext<'_>,
    scope: TextScope,
    rect: &BoxPx,
) -> Result<TextPrompt, PromptError> {
    let target = ctx.episode.target_class_id;
    if scope == TextScope::GroundTruth {
        let label = ctx
            .manifest
            .category_name(target)
            .ok_or_else(|| PromptError::Integrity(format!("category {target}")))?;
        return Ok(TextPrompt { label: label.to_string(), scope, fallback: false });
    }
    let caps = ctx.backend.capabilities();
    if !caps.supports_label_scoring {
        return Err(BackendError::Capability(format!(
            "{} does not score labels",
            caps.model_name
        ))
        .into());
    }
    let image = ctx
        .support_images
        .first()
        .ok_or_else(|| PromptError::Integrity("no support image loaded".into()))?;
    let req = LabelRequest {
        request_id: label_request_id(ctx.episode.episode_id),
        image: image.clone(),
        rect: *rect,
        labels: label_pool(scope, ctx.manifest, ctx.fold, target),
    };
    let scores = ctx.backend.score_labels(&req)?;
    let top = scores
        .into_iter()
        .next()
        .ok_or_else(|| PromptError::Backend(BackendError::Protocol("no label scores".into())))?;
    Ok(TextPrompt { label: top.label, scope, fallback: false })
}

/// [`select_text_label`], falling back to the true class name when the
/// backend lacks label scoring. Returns a warning in that case.
pub fn resolve_text_label(
    ctx: &PromptContext<'_>,
    scope: TextScope,
    rect: &BoxPx,
) -> Result<(TextPrompt, Option<String>), PromptError> {
    match select_text_label(ctx, scope, rect) {
        Err(PromptError::Backend(BackendError::Capability(msg))) => {
            let mut t = select_text_label(ctx, TextScope::GroundTruth, rect)?;
            t.scope = scope;
            t.fallback = true;
            Ok((t, Some(format!("text label fell back to ground truth: {msg}"))))
        }
        other => other.map(|t| (t, None)),
    }
}
