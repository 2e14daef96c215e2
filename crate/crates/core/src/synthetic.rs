//! Seeded synthetic dataset: flat-colored rectangles and ellipses on a
//! gradient, written as COCO JSON plus PNG files.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::data_ingest::{encode_rle, load_manifest, BitGrid, BoxPx, DatasetManifest, IngestError};

const VOC_NAMES: [&str; 20] = [
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// Images whose main object is of each class.
    pub images_per_class: usize,
    pub min_side: u32,
    pub max_side: u32,
    /// Chance of adding one object of another class to an image.
    pub secondary_probability: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            images_per_class: 4,
            min_side: 448,
            max_side: 672,
            secondary_probability: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub annotations_path: PathBuf,
    pub image_root: PathBuf,
    pub manifest: DatasetManifest,
}

pub fn class_name(i: usize) -> String {
    VOC_NAMES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{}", i + 1))
}

fn class_color(class: usize) -> Rgb<u8> {
    let h = (class as u32).wrapping_mul(2_654_435_761);
    Rgb([(h >> 24) as u8 | 0x40, (h >> 16) as u8 | 0x20, (h >> 8) as u8])
}

fn random_box(rng: &mut ChaCha8Rng, w: u32, h: u32, lo: f64, hi: f64) -> BoxPx {
    let bw = ((w as f64 * rng.random_range(lo..hi)) as u32).max(2);
    let bh = ((h as f64 * rng.random_range(lo..hi)) as u32).max(2);
    let x0 = rng.random_range(0..=w - bw);
    let y0 = rng.random_range(0..=h - bh);
    BoxPx::new(x0, y0, x0 + bw, y0 + bh)
}

fn ellipse(h: u32, w: u32, b: &BoxPx) -> BitGrid {
    let (cx, cy) = ((b.x0 + b.x1) as f64 / 2.0, (b.y0 + b.y1) as f64 / 2.0);
    let (rx, ry) = (b.width() as f64 / 2.0, b.height() as f64 / 2.0);
    BitGrid::from_fn(h, w, |r, c| {
        let dx = (c as f64 + 0.5 - cx) / rx;
        let dy = (r as f64 + 0.5 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    })
}

/// Writes `annotations.json` and `images/` under `dir` and parses them back.
pub fn write_synthetic(dir: &Path, spec: &SyntheticSpec) -> Result<SyntheticDataset, IngestError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| IngestError::Io { path, source }
    };
    let image_root = dir.join("images");
    std::fs::create_dir_all(&image_root).map_err(io(&image_root))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut next_ann = 1u64;
    let total = spec.classes * spec.images_per_class;
    for n in 0..total {
        let image_id = n as u64 + 1;
        let class = n % spec.classes;
        let w = rng.random_range(spec.min_side..=spec.max_side);
        let h = rng.random_range(spec.min_side..=spec.max_side);
        let tint: [u8; 3] = rng.random();
        let mut img = RgbImage::from_fn(w, h, |x, y| {
            Rgb([
                tint[0] / 4 + (x * 60 / w) as u8,
                tint[1] / 4 + (y * 60 / h) as u8,
                tint[2] / 4 + ((x + y) * 30 / (w + h)) as u8,
            ])
        });
        let mut objects: Vec<(usize, BoxPx)> = vec![(class, random_box(&mut rng, w, h, 0.4, 0.6))];
        if rng.random_bool(0.3) {
            objects.push((class, random_box(&mut rng, w, h, 0.15, 0.25)));
        }
        if spec.classes > 1 && rng.random_bool(spec.secondary_probability) {
            let other = (class + rng.random_range(1..spec.classes)) % spec.classes;
            objects.push((other, random_box(&mut rng, w, h, 0.15, 0.3)));
        }
        for (i, &(cls, b)) in objects.iter().enumerate() {
            let color = class_color(cls);
            // alternate rectangles (polygon) and ellipses (RLE)
            let segmentation = if i % 2 == 0 {
                for y in b.y0..b.y1 {
                    for x in b.x0..b.x1 {
                        img.put_pixel(x, y, color);
                    }
                }
                let (x0, y0, x1, y1) = (b.x0, b.y0, b.x1, b.y1);
                json!([[x0, y0, x1, y0, x1, y1, x0, y1]])
            } else {
                let grid = ellipse(h, w, &b);
                for y in b.y0..b.y1 {
                    for x in b.x0..b.x1 {
                        if grid.get(y, x) {
                            img.put_pixel(x, y, color);
                        }
                    }
                }
                let rle = encode_rle(&grid);
                json!({"size": [h, w], "counts": rle.counts()})
            };
            annotations.push(json!({
                "id": next_ann,
                "image_id": image_id,
                "category_id": cls as u64 + 1,
                "segmentation": segmentation,
                "iscrowd": 0,
            }));
            next_ann += 1;
        }
        let file_name = format!("{image_id:06}.png");
        let path = image_root.join(&file_name);
        img.save(&path)
            .map_err(|e| IngestError::Io { path: path.display().to_string(), source: std::io::Error::other(e) })?;
        images.push(json!({"id": image_id, "width": w, "height": h, "file_name": file_name}));
    }
    let categories: Vec<Value> = (0..spec.classes)
        .map(|c| json!({"id": c as u64 + 1, "name": class_name(c)}))
        .collect();
    let doc = json!({"images": images, "categories": categories, "annotations": annotations});
    let annotations_path = dir.join("annotations.json");
    std::fs::write(&annotations_path, serde_json::to_vec(&doc).expect("json"))
        .map_err(io(&annotations_path))?;
    let manifest = load_manifest(&annotations_path)?;
    Ok(SyntheticDataset { annotations_path, image_root, manifest })
}
