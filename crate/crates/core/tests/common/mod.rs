#![allow(dead_code)]

use std::path::Path;

use canvas_fss::canvas_geometry::{LayoutSpec, LayoutVariant, SupportPosition};
use canvas_fss::data_ingest::DatasetKind;
use canvas_fss::eval_runner::RunConfig;
use canvas_fss::synthetic::{write_synthetic, SyntheticDataset, SyntheticSpec};

/// Five classes, small images: fast enough for closed-loop runs.
pub fn small_dataset(dir: &Path) -> SyntheticDataset {
    let spec = SyntheticSpec {
        classes: 5,
        images_per_class: 8,
        min_side: 96,
        max_side: 160,
        secondary_probability: 0.8,
        seed: 3,
    };
    write_synthetic(dir, &spec).unwrap()
}

pub fn fr_vertical_top() -> LayoutSpec {
    LayoutSpec::new(LayoutVariant::FrVertical, SupportPosition::Top, Some(0.6), 1).unwrap()
}

pub fn base_config(ds: &SyntheticDataset, out: &Path) -> RunConfig {
    RunConfig {
        annotations: ds.annotations_path.clone(),
        image_root: ds.image_root.clone(),
        dataset_kind: DatasetKind::Pascal5i,
        fold_index: 0,
        fold_classes: Some(vec![1, 2, 3, 4, 5]),
        n_episodes: 20,
        seed: 7,
        layout: fr_vertical_top(),
        canvas_size: (512, 512),
        negative_scenario: Default::default(),
        text_scope: None,
        sampling: None,
        backend: "mock:perfect".into(),
        max_masks: 32,
        parallelism: 1,
        output_dir: out.to_path_buf(),
        label: None,
    }
}
