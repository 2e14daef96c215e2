use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::rle::{BitGrid, BoxPx, MaskRle};
use super::IngestError;

pub type ImageId = u64;
pub type CategoryId = u64;
pub type AnnotationId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    pub file_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDef {
    pub id: CategoryId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub id: AnnotationId,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub mask: MaskRle,
    /// Tight box of `mask`.
    pub bbox: BoxPx,
    /// Foreground pixel count of `mask`.
    pub area: u64,
}

impl InstanceAnnotation {
    /// Builds an annotation whose box and area are derived from the mask.
    /// Returns `None` for an empty mask.
    pub fn from_mask(
        id: AnnotationId,
        image_id: ImageId,
        category_id: CategoryId,
        mask: MaskRle,
    ) -> Option<Self> {
        let bbox = mask.bbox()?;
        let area = mask.area();
        Some(Self {
            id,
            image_id,
            category_id,
            mask,
            bbox,
            area,
        })
    }
}

/// Counts of annotations dropped during ingestion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestWarnings {
    pub skipped_crowd: usize,
    pub skipped_empty: usize,
}

/// Resolved dataset: images, categories and instance masks with lookup indexes.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    images: Vec<ImageRecord>,
    categories: Vec<CategoryDef>,
    annotations: Vec<InstanceAnnotation>,
    image_index: BTreeMap<ImageId, usize>,
    category_index: BTreeMap<CategoryId, usize>,
    annotation_index: BTreeMap<AnnotationId, usize>,
    by_image: BTreeMap<ImageId, Vec<usize>>,
    images_by_category: BTreeMap<CategoryId, BTreeSet<ImageId>>,
    warnings: IngestWarnings,
}

impl DatasetManifest {
    pub fn new(
        images: Vec<ImageRecord>,
        mut categories: Vec<CategoryDef>,
        annotations: Vec<InstanceAnnotation>,
    ) -> Result<Self, IngestError> {
        categories.sort_by_key(|c| c.id);
        let mut image_index = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            if img.width == 0 || img.height == 0 {
                return Err(IngestError::Integrity(format!(
                    "image {} has zero width or height",
                    img.id
                )));
            }
            if image_index.insert(img.id, i).is_some() {
                return Err(IngestError::Integrity(format!(
                    "duplicate image id {}",
                    img.id
                )));
            }
        }
        let mut category_index = BTreeMap::new();
        for (i, cat) in categories.iter().enumerate() {
            if category_index.insert(cat.id, i).is_some() {
                return Err(IngestError::Integrity(format!(
                    "duplicate category id {}",
                    cat.id
                )));
            }
        }
        let mut annotation_index = BTreeMap::new();
        let mut by_image: BTreeMap<ImageId, Vec<usize>> = BTreeMap::new();
        let mut images_by_category: BTreeMap<CategoryId, BTreeSet<ImageId>> = categories
            .iter()
            .map(|c| (c.id, BTreeSet::new()))
            .collect();
        for (i, ann) in annotations.iter().enumerate() {
            if annotation_index.insert(ann.id, i).is_some() {
                return Err(IngestError::Integrity(format!(
                    "duplicate annotation id {}",
                    ann.id
                )));
            }
            let Some(&img_pos) = image_index.get(&ann.image_id) else {
                return Err(IngestError::Integrity(format!(
                    "annotation {} references missing image id {}",
                    ann.id, ann.image_id
                )));
            };
            let Some(cat_images) = images_by_category.get_mut(&ann.category_id) else {
                return Err(IngestError::Integrity(format!(
                    "annotation {} references missing category id {}",
                    ann.id, ann.category_id
                )));
            };
            let img = &images[img_pos];
            if ann.mask.size() != (img.height, img.width) {
                return Err(IngestError::Integrity(format!(
                    "annotation {} mask is {:?} but image {} is {}x{}",
                    ann.id,
                    ann.mask.size(),
                    img.id,
                    img.height,
                    img.width
                )));
            }
            cat_images.insert(ann.image_id);
            by_image.entry(ann.image_id).or_default().push(i);
        }
        for list in by_image.values_mut() {
            list.sort_by_key(|&i| annotations[i].id);
        }
        Ok(Self {
            images,
            categories,
            annotations,
            image_index,
            category_index,
            annotation_index,
            by_image,
            images_by_category,
            warnings: IngestWarnings::default(),
        })
    }

    pub(crate) fn with_warnings(mut self, warnings: IngestWarnings) -> Self {
        self.warnings = warnings;
        self
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    /// Categories in ascending id order.
    pub fn categories(&self) -> &[CategoryDef] {
        &self.categories
    }

    pub fn annotations(&self) -> &[InstanceAnnotation] {
        &self.annotations
    }

    pub fn warnings(&self) -> IngestWarnings {
        self.warnings
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageRecord> {
        self.image_index.get(&id).map(|&i| &self.images[i])
    }

    pub fn category(&self, id: CategoryId) -> Option<&CategoryDef> {
        self.category_index.get(&id).map(|&i| &self.categories[i])
    }

    pub fn category_name(&self, id: CategoryId) -> Option<&str> {
        self.category(id).map(|c| c.name.as_str())
    }

    pub fn annotation(&self, id: AnnotationId) -> Option<&InstanceAnnotation> {
        self.annotation_index.get(&id).map(|&i| &self.annotations[i])
    }

    /// All instances in an image, ascending annotation id.
    pub fn instances_in(&self, image_id: ImageId) -> impl Iterator<Item = &InstanceAnnotation> {
        self.by_image
            .get(&image_id)
            .into_iter()
            .flatten()
            .map(move |&i| &self.annotations[i])
    }

    pub fn instances_of(
        &self,
        image_id: ImageId,
        category_id: CategoryId,
    ) -> impl Iterator<Item = &InstanceAnnotation> {
        self.instances_in(image_id)
            .filter(move |a| a.category_id == category_id)
    }

    /// Images containing at least one instance of the category, ascending id.
    pub fn images_with(&self, category_id: CategoryId) -> impl Iterator<Item = ImageId> + '_ {
        self.images_by_category
            .get(&category_id)
            .into_iter()
            .flatten()
            .copied()
    }

    /// Number of distinct categories present in an image.
    pub fn category_count(&self, image_id: ImageId) -> usize {
        self.instances_in(image_id)
            .map(|a| a.category_id)
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Union of all instances of a category in an image, at image resolution.
    pub fn semantic_mask(&self, image_id: ImageId, category_id: CategoryId) -> Option<MaskRle> {
        let img = self.image(image_id)?;
        let mut grid = BitGrid::new(img.height, img.width);
        for ann in self.instances_of(image_id, category_id) {
            grid.union_with(&ann.mask.decode());
        }
        Some(super::rle::encode_rle(&grid))
    }
}
