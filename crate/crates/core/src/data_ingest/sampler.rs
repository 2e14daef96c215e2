//! Seeded episode sampling.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::folds::FoldSpec;
use super::manifest::{AnnotationId, CategoryId, DatasetManifest, ImageId};
use super::IngestError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingConstraint {
    #[default]
    Standard,
    /// Only images containing at least two categories are eligible.
    MultiCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportRef {
    pub image_id: ImageId,
    /// Target-class instances in the support image, ascending id.
    pub instance_ids: Vec<AnnotationId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: u64,
    pub fold_index: usize,
    pub target_class_id: CategoryId,
    pub support: Vec<SupportRef>,
    pub query_image_id: ImageId,
    pub shot: usize,
    /// Per-episode seed drawn from the sampler stream; seeds any randomized
    /// prompt generation for this episode.
    pub seed: u64,
}

impl Episode {
    pub fn support_image_ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.support.iter().map(|s| s.image_id)
    }
}

fn eligible_images(
    manifest: &DatasetManifest,
    class_id: CategoryId,
    constraint: SamplingConstraint,
) -> Vec<ImageId> {
    manifest
        .images_with(class_id)
        .filter(|&img| match constraint {
            SamplingConstraint::Standard => true,
            SamplingConstraint::MultiCategory => manifest.category_count(img) >= 2,
        })
        .collect()
}

/// Draws `n_episodes` episodes for a fold.
///
/// Each episode picks its class uniformly from the fold, a query uniformly
/// from the eligible images, then `shot` distinct supports from the remaining
/// eligible images. Images may recur across episodes.
pub fn sample_episodes(
    manifest: &DatasetManifest,
    fold: &FoldSpec,
    shot: usize,
    n_episodes: usize,
    seed: u64,
    constraint: SamplingConstraint,
) -> Result<Vec<Episode>, IngestError> {
    if shot == 0 {
        return Err(IngestError::Config("shot must be at least 1".into()));
    }
    if fold.test_class_ids.is_empty() {
        return Err(IngestError::Config("fold has no test classes".into()));
    }
    let mut pools = Vec::with_capacity(fold.test_class_ids.len());
    for &class_id in &fold.test_class_ids {
        let pool = eligible_images(manifest, class_id, constraint);
        if pool.len() < shot + 1 {
            let name = manifest.category_name(class_id).unwrap_or("?");
            return Err(IngestError::Sampling(format!(
                "class {class_id} ({name}) has {} eligible images, needs {}",
                pool.len(),
                shot + 1
            )));
        }
        pools.push(pool);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(n_episodes);
    for episode_id in 0..n_episodes as u64 {
        let class_pos = rng.random_range(0..fold.test_class_ids.len());
        let class_id = fold.test_class_ids[class_pos];
        let pool = &pools[class_pos];
        let query_pos = rng.random_range(0..pool.len());
        let query_image_id = pool[query_pos];
        let rest: Vec<ImageId> = pool
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != query_pos)
            .map(|(_, &id)| id)
            .collect();
        let support = index::sample(&mut rng, rest.len(), shot)
            .into_iter()
            .map(|i| {
                let image_id = rest[i];
                SupportRef {
                    image_id,
                    instance_ids: manifest
                        .instances_of(image_id, class_id)
                        .map(|a| a.id)
                        .collect(),
                }
            })
            .collect();
        let episode_seed = rng.random::<u64>();
        episodes.push(Episode {
            episode_id,
            fold_index: fold.fold_index,
            target_class_id: class_id,
            support,
            query_image_id,
            shot,
            seed: episode_seed,
        });
    }
    Ok(episodes)
}

/// Checks every invariant an emitted episode must satisfy.
pub fn validate_episode(
    episode: &Episode,
    fold: &FoldSpec,
    manifest: &DatasetManifest,
) -> Result<(), String> {
    if episode.support.len() != episode.shot {
        return Err(format!(
            "episode {} has {} supports for shot {}",
            episode.episode_id,
            episode.support.len(),
            episode.shot
        ));
    }
    if !fold.contains(episode.target_class_id) {
        return Err(format!(
            "episode {} class {} not in fold {}",
            episode.episode_id, episode.target_class_id, fold.fold_index
        ));
    }
    if episode.support_image_ids().any(|s| s == episode.query_image_id) {
        return Err(format!(
            "episode {} reuses query image {} as support",
            episode.episode_id, episode.query_image_id
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in &episode.support {
        if !seen.insert(s.image_id) {
            return Err(format!(
                "episode {} repeats support image {}",
                episode.episode_id, s.image_id
            ));
        }
    }
    for img in episode
        .support_image_ids()
        .chain(std::iter::once(episode.query_image_id))
    {
        if manifest
            .instances_of(img, episode.target_class_id)
            .next()
            .is_none()
        {
            return Err(format!(
                "episode {} image {} lacks class {}",
                episode.episode_id, img, episode.target_class_id
            ));
        }
    }
    Ok(())
}
