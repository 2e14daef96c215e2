//! The episodic loop: compose, prompt, segment, decompose, score.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::results::{
    EpisodeResult, EpisodeStatus, PromptSummary, ResultsFile, ResultsHeader, ResultsWriter,
    FORMAT_VERSION, RESULTS_FILE, SUMMARY_FILE,
};
use super::RunError;
use crate::backend_gateway::{
    merge_masks, open_backend, BackendError, OracleEntry, OracleRegistry, ScoredMask,
    SegmentRequest, Segmenter, ORACLE_SCORE,
};
use crate::canvas_geometry::{
    compose, from_canvas_mask, paint_mask, plan_layout, CanvasPlan, ComposedCanvas,
};
use crate::data_ingest::{
    build_folds, encode_rle, load_manifest, sample_episodes, BitGrid, CategoryId,
    DatasetManifest, Episode, FoldSpec, ImageId,
};
use crate::metrics::{episode_counts, fb_iou, miou, miou_per_episode_mean, MetricsAccumulator};
use crate::prompt_engine::{
    aux_request_id, build_prompts, canvas_request_id, label_request_id, BuiltPrompts,
    NegativeScenario, PromptContext, PromptError,
};

/// Score the oracle gives non-target instances in the auxiliary pass.
pub const ORACLE_DISTRACTOR_SCORE: f64 = 0.25;
/// Share of failed episodes above which a run fails.
pub const MAX_FAILED_FRACTION: f64 = 0.01;

/// A config resolved against its dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub manifest: DatasetManifest,
    pub fold: FoldSpec,
    pub episodes: Vec<Episode>,
}

pub fn resolve_fold(config: &RunConfig, manifest: &DatasetManifest) -> Result<FoldSpec, RunError> {
    let fold = match &config.fold_classes {
        Some(ids) => FoldSpec::new(config.dataset_kind, config.fold_index, ids.clone())?,
        None => build_folds(config.dataset_kind, manifest)?
            .into_iter()
            .nth(config.fold_index)
            .ok_or_else(|| RunError::Config(format!("no fold {}", config.fold_index)))?,
    };
    if let Some(id) = fold.test_class_ids.iter().find(|&&id| manifest.category(id).is_none()) {
        return Err(RunError::Config(format!("fold class {id} is not in the manifest")));
    }
    Ok(fold)
}

/// Loads the manifest, resolves the fold and samples the episode list.
pub fn prepare(config: &RunConfig) -> Result<Prepared, RunError> {
    config.validate()?;
    let manifest = load_manifest(&config.annotations)?;
    let warnings = manifest.warnings();
    if warnings.skipped_crowd + warnings.skipped_empty > 0 {
        log::info!(
            "skipped {} crowd and {} empty annotations",
            warnings.skipped_crowd,
            warnings.skipped_empty
        );
    }
    let fold = resolve_fold(config, &manifest)?;
    let episodes = sample_episodes(
        &manifest,
        &fold,
        config.shot(),
        config.n_episodes,
        config.seed,
        config.sampling_constraint(),
    )?;
    Ok(Prepared { config: config.clone(), manifest, fold, episodes })
}

enum Failure {
    /// Counted against the episode; the run continues.
    Backend(BackendError),
    Fatal(RunError),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Failure::Fatal(e)
    }
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        Failure::Backend(e)
    }
}

impl From<PromptError> for Failure {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Backend(b) => Failure::Backend(b),
            other => Failure::Fatal(RunError::Prompt(other.to_string())),
        }
    }
}

fn load_image(prep: &Prepared, id: ImageId) -> Result<RgbImage, RunError> {
    let rec = prep
        .manifest
        .image(id)
        .ok_or_else(|| RunError::Config(format!("image {id} not in manifest")))?;
    let path = prep.config.image_root.join(&rec.file_path);
    let img = image::open(&path)
        .map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?
        .to_rgb8();
    if img.dimensions() != (rec.width, rec.height) {
        return Err(RunError::Config(format!(
            "{} is {}x{}, the manifest says {}x{}",
            path.display(),
            img.width(),
            img.height(),
            rec.width,
            rec.height
        )));
    }
    Ok(img)
}

/// Everything sent to the backend for one episode.
pub struct ComposedEpisode {
    pub canvas: ComposedCanvas,
    pub prompts: BuiltPrompts,
}

impl ComposedEpisode {
    pub fn plan(&self) -> &CanvasPlan {
        &self.canvas.plan
    }
}

fn compose_inner(
    prep: &Prepared,
    episode: &Episode,
    backend: &dyn Segmenter,
) -> Result<ComposedEpisode, Failure> {
    let cfg = &prep.config;
    let query = load_image(prep, episode.query_image_id)?;
    let supports: Vec<Arc<RgbImage>> = episode
        .support_image_ids()
        .map(|id| load_image(prep, id).map(Arc::new))
        .collect::<Result<_, _>>()?;
    let sizes: Vec<(u32, u32)> = supports.iter().map(|s| s.dimensions()).collect();
    let plan = plan_layout(&cfg.layout, &sizes, query.dimensions(), cfg.canvas_size)
        .map_err(RunError::from)?;
    let refs: Vec<&RgbImage> = supports.iter().map(|s| s.as_ref()).collect();
    let canvas = compose(&plan, &refs, &query).map_err(RunError::from)?;
    if let Some(registry) = backend.oracle_registry() {
        register_ground_truth(registry, prep, episode, &plan)?;
    }
    let ctx = PromptContext {
        episode,
        manifest: &prep.manifest,
        fold: &prep.fold,
        plan: &plan,
        support_images: &supports,
        backend,
    };
    let prompts = build_prompts(&ctx, &cfg.negative_scenario, cfg.text_scope)?;
    Ok(ComposedEpisode { canvas, prompts })
}

/// Plans, composes and prompts one episode without segmenting it.
pub fn compose_episode(
    prep: &Prepared,
    episode: &Episode,
    backend: &dyn Segmenter,
) -> Result<ComposedEpisode, RunError> {
    let out = compose_inner(prep, episode, backend);
    if let Some(registry) = backend.oracle_registry() {
        forget(registry, episode);
    }
    out.map_err(|f| match f {
        Failure::Backend(e) => RunError::Backend(e),
        Failure::Fatal(e) => e,
    })
}

/// Fills the oracle's answers for every request this episode will make.
fn register_ground_truth(
    registry: &OracleRegistry,
    prep: &Prepared,
    episode: &Episode,
    plan: &CanvasPlan,
) -> Result<(), RunError> {
    let m = &prep.manifest;
    let target = episode.target_class_id;
    let label = m.category_name(target).map(str::to_string);
    let semantic = |image: ImageId| {
        m.semantic_mask(image, target)
            .ok_or_else(|| RunError::Config(format!("image {image} not in manifest")))
    };
    let (w, h) = plan.canvas_size;
    let mut grid = BitGrid::new(h, w);
    for (k, s) in episode.support.iter().enumerate() {
        let placement = plan.support(k).expect("plan has every support");
        paint_mask(&mut grid, &semantic(s.image_id)?.decode(), placement);
    }
    paint_mask(&mut grid, &semantic(episode.query_image_id)?.decode(), plan.query());
    registry.insert(
        canvas_request_id(episode.episode_id),
        OracleEntry {
            masks: vec![ScoredMask { mask: encode_rle(&grid), score: ORACLE_SCORE }],
            label: label.clone(),
        },
    );
    if matches!(prep.config.negative_scenario, NegativeScenario::ThresholdPartition { .. }) {
        for (k, s) in episode.support.iter().enumerate() {
            let mut masks = vec![ScoredMask { mask: semantic(s.image_id)?, score: ORACLE_SCORE }];
            masks.extend(m.instances_in(s.image_id).filter(|a| a.category_id != target).map(|a| {
                ScoredMask { mask: a.mask.clone(), score: ORACLE_DISTRACTOR_SCORE }
            }));
            registry.insert(
                aux_request_id(episode.episode_id, k),
                OracleEntry { masks, label: label.clone() },
            );
        }
    }
    registry.insert(label_request_id(episode.episode_id), OracleEntry { masks: Vec::new(), label });
    Ok(())
}

fn forget(registry: &OracleRegistry, episode: &Episode) {
    registry.remove(&canvas_request_id(episode.episode_id));
    registry.remove(&label_request_id(episode.episode_id));
    for k in 0..episode.support.len() {
        registry.remove(&aux_request_id(episode.episode_id, k));
    }
}

struct Scored {
    counts: crate::metrics::PixelCounts,
    prompts: PromptSummary,
    warnings: Vec<String>,
}

fn score_episode(
    prep: &Prepared,
    episode: &Episode,
    backend: &dyn Segmenter,
) -> Result<Scored, Failure> {
    let composed = compose_inner(prep, episode, backend)?;
    let plan = composed.plan();
    let bundle = &composed.prompts.bundle;
    let request = SegmentRequest {
        request_id: canvas_request_id(episode.episode_id),
        image: Arc::new(composed.canvas.pixels.clone()),
        boxes: bundle.boxes(),
        text: bundle.text.as_ref().map(|t| t.label.clone()),
        max_masks: prep.config.max_masks,
    };
    let masks = backend.segment(&request)?;
    let merged = merge_masks(&masks, plan.canvas_size, plan.query().rect)?;
    let prediction = from_canvas_mask(&merged, plan.query());
    let truth = prep
        .manifest
        .semantic_mask(episode.query_image_id, episode.target_class_id)
        .ok_or_else(|| RunError::Config(format!("image {} not in manifest", episode.query_image_id)))?;
    let counts = episode_counts(&prediction, &truth).map_err(RunError::from)?;
    Ok(Scored {
        counts,
        prompts: PromptSummary {
            n_pos: bundle.positives.len(),
            n_neg: bundle.negatives.len(),
            text_label: bundle.text.as_ref().map(|t| t.label.clone()),
        },
        warnings: composed.prompts.warnings.clone(),
    })
}

/// Runs one episode. Backend failures give a `failed` record; anything else
/// aborts the run.
pub fn run_episode(
    prep: &Prepared,
    episode: &Episode,
    backend: &dyn Segmenter,
) -> Result<EpisodeResult, RunError> {
    let start = Instant::now();
    let outcome = score_episode(prep, episode, backend);
    if let Some(registry) = backend.oracle_registry() {
        forget(registry, episode);
    }
    let mut record = EpisodeResult {
        episode_id: episode.episode_id,
        status: EpisodeStatus::Ok,
        target_class_id: episode.target_class_id,
        target_class: prep
            .manifest
            .category_name(episode.target_class_id)
            .unwrap_or_default()
            .to_string(),
        query_image_id: episode.query_image_id,
        support_image_ids: episode.support_image_ids().collect(),
        counts: None,
        prompts: PromptSummary::default(),
        error: None,
        warnings: Vec::new(),
        wall_time_ms: 0,
    };
    match outcome {
        Ok(s) => {
            record.counts = Some(s.counts);
            record.prompts = s.prompts;
            record.warnings = s.warnings;
        }
        Err(Failure::Backend(e)) => {
            log::warn!("episode {} failed: {e}", episode.episode_id);
            record.status = EpisodeStatus::Failed;
            record.error = Some(e.to_string());
        }
        Err(Failure::Fatal(e)) => return Err(e),
    }
    record.wall_time_ms = start.elapsed().as_millis() as u64;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_id: CategoryId,
    pub name: String,
    pub iou: Option<f64>,
    pub intersection: u64,
    pub union: u64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub n_episodes: usize,
    pub completed: usize,
    pub failed: usize,
    /// Mean over sampled fold classes of the aggregated class IoU.
    pub miou: Option<f64>,
    /// Same, averaging per-episode IoUs within each class instead.
    pub miou_per_episode_mean: Option<f64>,
    pub fb_iou: Option<f64>,
    pub classes: Vec<ClassSummary>,
    /// Fold classes no successful episode drew.
    pub unsampled_classes: Vec<CategoryId>,
}

/// Seals an accumulator into a summary.
pub fn summarize(
    config_hash: &str,
    n_episodes: usize,
    failed: usize,
    fold_classes: &[CategoryId],
    class_names: &dyn Fn(CategoryId) -> String,
    acc: &MetricsAccumulator,
) -> Result<RunSummary, RunError> {
    let observed: Vec<CategoryId> = fold_classes
        .iter()
        .copied()
        .filter(|&c| acc.classes.class(c).is_some())
        .collect();
    let unsampled = fold_classes.iter().copied().filter(|c| !observed.contains(c)).collect();
    let (miou_v, per_ep, fb) = if observed.is_empty() {
        (None, None, None)
    } else {
        (
            Some(miou(&acc.classes, &observed)?),
            Some(miou_per_episode_mean(&acc.classes, &observed)?),
            Some(fb_iou(&acc.fb)?),
        )
    };
    let classes = fold_classes
        .iter()
        .map(|&c| {
            let sums = acc.classes.class(c);
            ClassSummary {
                class_id: c,
                name: class_names(c),
                iou: sums.and_then(|s| s.iou()),
                intersection: sums.map_or(0, |s| s.intersection),
                union: sums.map_or(0, |s| s.union),
                episodes: sums.map_or(0, |s| s.episodes()),
            }
        })
        .collect();
    Ok(RunSummary {
        config_hash: config_hash.to_string(),
        n_episodes,
        completed: acc.episodes,
        failed,
        miou: miou_v,
        miou_per_episode_mean: per_ep,
        fb_iou: fb,
        classes,
        unsampled_classes: unsampled,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub results_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: RunSummary,
}

/// Opens the configured backend and runs.
pub fn run(config: &RunConfig) -> Result<RunOutcome, RunError> {
    let prep = prepare(config)?;
    let backend = open_backend(&config.backend, config.parallelism)?;
    run_prepared(&prep, backend.as_ref())
}

pub fn run_with_backend(config: &RunConfig, backend: &dyn Segmenter) -> Result<RunOutcome, RunError> {
    run_prepared(&prepare(config)?, backend)
}

/// Runs the episodes not yet present in the output directory's results file.
pub fn run_prepared(prep: &Prepared, backend: &dyn Segmenter) -> Result<RunOutcome, RunError> {
    let cfg = &prep.config;
    let io = |p: &Path, e: std::io::Error| RunError::Io(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| io(&cfg.output_dir, e))?;
    let results_path = cfg.output_dir.join(RESULTS_FILE);
    let hash = cfg.config_hash();
    let (mut writer, prior) = if results_path.exists() {
        let existing = ResultsFile::read(&results_path)?;
        if existing.header.config_hash != hash {
            return Err(RunError::Results(format!(
                "{} belongs to a different configuration (hash {}, expected {hash})",
                results_path.display(),
                existing.header.config_hash
            )));
        }
        log::info!("resuming: {} episodes already recorded", existing.records.len());
        (ResultsWriter::resume(&results_path, existing.valid_len)?, Some(existing))
    } else {
        let header = ResultsHeader {
            format_version: FORMAT_VERSION,
            config_hash: hash.clone(),
            config: cfg.clone(),
            fold_classes: prep.fold.test_class_ids.clone(),
        };
        (ResultsWriter::create(&results_path, &header)?, None)
    };
    let done: BTreeSet<u64> = prior.iter().flat_map(|p| p.records.iter().map(|r| r.episode_id)).collect();
    let todo: Vec<&Episode> = prep.episodes.iter().filter(|e| !done.contains(&e.episode_id)).collect();

    let (new_acc, new_failed) = execute(prep, backend, &todo, &mut writer)?;
    let mut acc = prior.as_ref().map(ResultsFile::accumulate).unwrap_or_default();
    acc.merge(&new_acc);
    let failed = new_failed + prior.as_ref().map_or(0, ResultsFile::failed);

    let names = |c: CategoryId| prep.manifest.category_name(c).unwrap_or_default().to_string();
    let summary = summarize(&hash, cfg.n_episodes, failed, &prep.fold.test_class_ids, &names, &acc)?;
    let summary_path = cfg.output_dir.join(SUMMARY_FILE);
    let body = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    std::fs::write(&summary_path, body).map_err(|e| io(&summary_path, e))?;
    if failed as f64 > MAX_FAILED_FRACTION * cfg.n_episodes as f64 {
        return Err(RunError::TooManyFailures { failed, total: cfg.n_episodes });
    }
    Ok(RunOutcome { results_path, summary_path, summary })
}

/// Worker pool plus an in-order serializer. Returns the merged accumulator
/// of the new episodes and their failure count.
fn execute(
    prep: &Prepared,
    backend: &dyn Segmenter,
    todo: &[&Episode],
    writer: &mut ResultsWriter,
) -> Result<(MetricsAccumulator, usize), RunError> {
    if todo.is_empty() {
        return Ok((MetricsAccumulator::default(), 0));
    }
    let workers = prep.config.parallelism.clamp(1, todo.len());
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<EpisodeResult, RunError>)>();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                let tx = tx.clone();
                let (next, abort) = (&next, &abort);
                scope.spawn(move || {
                    let mut acc = MetricsAccumulator::default();
                    while !abort.load(Ordering::Relaxed) {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(episode) = todo.get(i) else { break };
                        let result = run_episode(prep, episode, backend);
                        match &result {
                            Ok(r) => {
                                if let (EpisodeStatus::Ok, Some(c)) = (r.status, &r.counts) {
                                    acc.add(r.target_class_id, c);
                                }
                            }
                            Err(_) => abort.store(true, Ordering::Relaxed),
                        }
                        if tx.send((i, result)).is_err() {
                            break;
                        }
                    }
                    acc
                })
            })
            .collect();
        drop(tx);

        let mut pending: BTreeMap<usize, EpisodeResult> = BTreeMap::new();
        let mut next_write = 0;
        let mut failed = 0;
        let mut first_error: Option<RunError> = None;
        for (i, result) in rx {
            match result {
                Ok(record) => {
                    pending.insert(i, record);
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                    abort.store(true, Ordering::Relaxed);
                }
            }
            while let Some(record) = pending.remove(&next_write) {
                if first_error.is_none() {
                    if let Err(e) = writer.append(&record) {
                        first_error = Some(e);
                        abort.store(true, Ordering::Relaxed);
                    }
                }
                failed += (record.status == EpisodeStatus::Failed) as usize;
                next_write += 1;
                if next_write % 50 == 0 {
                    log::info!("{next_write}/{} episodes", todo.len());
                }
            }
        }
        let mut acc = MetricsAccumulator::default();
        for h in handles {
            acc.merge(&h.join().expect("episode worker panicked"));
        }
        match first_error {
            Some(e) => Err(e),
            None => Ok((acc, failed)),
        }
    })
}
