use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::manifest::{CategoryId, DatasetManifest};
use super::IngestError;

pub const FOLD_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Pascal5i,
    Coco20i,
}

impl DatasetKind {
    pub fn class_count(self) -> usize {
        match self {
            DatasetKind::Pascal5i => 20,
            DatasetKind::Coco20i => 80,
        }
    }

    pub fn classes_per_fold(self) -> usize {
        self.class_count() / FOLD_COUNT
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Pascal5i => "pascal5i",
            DatasetKind::Coco20i => "coco20i",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub dataset_kind: DatasetKind,
    pub fold_index: usize,
    pub test_class_ids: Vec<CategoryId>,
}

impl FoldSpec {
    /// Builds a fold from an explicit class list (used for config overrides).
    pub fn new(
        dataset_kind: DatasetKind,
        fold_index: usize,
        test_class_ids: Vec<CategoryId>,
    ) -> Result<Self, IngestError> {
        if fold_index >= FOLD_COUNT {
            return Err(IngestError::Config(format!(
                "fold index {fold_index} out of range 0..{FOLD_COUNT}"
            )));
        }
        let expected = dataset_kind.classes_per_fold();
        let distinct: BTreeSet<_> = test_class_ids.iter().collect();
        if test_class_ids.len() != expected || distinct.len() != expected {
            return Err(IngestError::Config(format!(
                "{dataset_kind} folds need {expected} distinct classes, got {:?}",
                test_class_ids
            )));
        }
        Ok(Self {
            dataset_kind,
            fold_index,
            test_class_ids,
        })
    }

    pub fn contains(&self, class_id: CategoryId) -> bool {
        self.test_class_ids.contains(&class_id)
    }
}

/// Splits the manifest's categories into the four test folds.
///
/// With categories in ascending id order at ordinal positions `p`:
/// PASCAL-5i fold `i` holds `p` in `5i..5i+5`; COCO-20i fold `i` holds every
/// `p` with `p % 4 == i`.
pub fn build_folds(
    dataset_kind: DatasetKind,
    manifest: &DatasetManifest,
) -> Result<Vec<FoldSpec>, IngestError> {
    let ids: Vec<CategoryId> = manifest.categories().iter().map(|c| c.id).collect();
    build_folds_from_ids(dataset_kind, &ids)
}

pub fn build_folds_from_ids(
    dataset_kind: DatasetKind,
    category_ids: &[CategoryId],
) -> Result<Vec<FoldSpec>, IngestError> {
    if category_ids.len() != dataset_kind.class_count() {
        return Err(IngestError::Config(format!(
            "{dataset_kind} needs {} categories, manifest has {}",
            dataset_kind.class_count(),
            category_ids.len()
        )));
    }
    let mut ids = category_ids.to_vec();
    ids.sort_unstable();
    let per_fold = dataset_kind.classes_per_fold();
    (0..FOLD_COUNT)
        .map(|fold| {
            let classes = match dataset_kind {
                DatasetKind::Pascal5i => ids[fold * per_fold..(fold + 1) * per_fold].to_vec(),
                DatasetKind::Coco20i => ids
                    .iter()
                    .enumerate()
                    .filter(|(p, _)| p % FOLD_COUNT == fold)
                    .map(|(_, &id)| id)
                    .collect(),
            };
            FoldSpec::new(dataset_kind, fold, classes)
        })
        .collect()
}
