//! COCO instance-annotation documents.

use log::warn;
use serde::Deserialize;

use super::manifest::{CategoryDef, DatasetManifest, ImageRecord, InstanceAnnotation, IngestWarnings};
use super::rle::{decode_compressed_counts, encode_rle, BitGrid, MaskRle};
use super::IngestError;

#[derive(Deserialize)]
struct CocoDoc {
    images: Vec<CocoImage>,
    categories: Vec<CocoCategory>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    segmentation: Segmentation,
    #[serde(default)]
    iscrowd: Crowd,
}

#[derive(Deserialize, Default)]
#[serde(untagged)]
enum Crowd {
    #[default]
    No,
    Int(u8),
    Bool(bool),
}

impl Crowd {
    fn is_crowd(&self) -> bool {
        matches!(self, Crowd::Int(n) if *n != 0) || matches!(self, Crowd::Bool(true))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { size: [u32; 2], counts: RleCounts },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RleCounts {
    Raw(Vec<u32>),
    Compressed(String),
}

/// Parses a COCO instance-annotation document into a resolved manifest.
///
/// Polygons are rasterized with [`rasterize_polygons`]; compressed RLE strings
/// are expanded. Crowd annotations and annotations with empty masks are
/// dropped and counted in [`DatasetManifest::warnings`].
pub fn parse_manifest(raw: &[u8]) -> Result<DatasetManifest, IngestError> {
    let doc: CocoDoc = serde_json::from_slice(raw).map_err(|e| IngestError::Parse {
        offset: byte_offset(raw, e.line(), e.column()),
        message: e.to_string(),
    })?;

    let images: Vec<ImageRecord> = doc
        .images
        .into_iter()
        .map(|i| ImageRecord {
            id: i.id,
            width: i.width,
            height: i.height,
            file_path: i.file_name,
        })
        .collect();
    let categories = doc
        .categories
        .into_iter()
        .map(|c| CategoryDef {
            id: c.id,
            name: c.name,
        })
        .collect();

    let dims: std::collections::HashMap<u64, (u32, u32)> = images
        .iter()
        .map(|i| (i.id, (i.height, i.width)))
        .collect();

    let mut warnings = IngestWarnings::default();
    let mut annotations = Vec::with_capacity(doc.annotations.len());
    for ann in doc.annotations {
        if ann.iscrowd.is_crowd() {
            warnings.skipped_crowd += 1;
            continue;
        }
        let Some(&(height, width)) = dims.get(&ann.image_id) else {
            return Err(IngestError::Integrity(format!(
                "annotation {} references missing image id {}",
                ann.id, ann.image_id
            )));
        };
        let mask = match ann.segmentation {
            Segmentation::Polygons(polys) => {
                if let Some(bad) = polys.iter().find(|p| p.len() % 2 != 0 || p.len() < 6) {
                    return Err(IngestError::Integrity(format!(
                        "annotation {} has a polygon with {} coordinates",
                        ann.id,
                        bad.len()
                    )));
                }
                encode_rle(&rasterize_polygons(&polys, height, width))
            }
            Segmentation::Rle { size, counts } => {
                if size != [height, width] {
                    return Err(IngestError::Integrity(format!(
                        "annotation {} RLE size {:?} does not match image {} ({}x{})",
                        ann.id, size, ann.image_id, height, width
                    )));
                }
                let counts = match counts {
                    RleCounts::Raw(c) => c,
                    RleCounts::Compressed(s) => decode_compressed_counts(&s)
                        .map_err(|source| IngestError::Codec { annotation: ann.id, source })?,
                };
                MaskRle::from_raw_counts(height, width, &counts)
                    .map_err(|source| IngestError::Codec { annotation: ann.id, source })?
            }
        };
        match InstanceAnnotation::from_mask(ann.id, ann.image_id, ann.category_id, mask) {
            Some(a) => annotations.push(a),
            None => warnings.skipped_empty += 1,
        }
    }
    if warnings.skipped_crowd > 0 || warnings.skipped_empty > 0 {
        warn!(
            "skipped {} crowd and {} empty annotations",
            warnings.skipped_crowd, warnings.skipped_empty
        );
    }
    Ok(DatasetManifest::new(images, categories, annotations)?.with_warnings(warnings))
}

fn byte_offset(raw: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = raw
        .split(|&b| b == b'\n')
        .take(line - 1)
        .map(|l| l.len() + 1)
        .sum();
    (line_start + column.saturating_sub(1)).min(raw.len())
}

/// Rasterizes flat `[x0,y0,x1,y1,...]` polygons onto a `height x width` grid.
///
/// A pixel is foreground when its center lies inside any polygon under the
/// even-odd rule.
pub fn rasterize_polygons(polygons: &[Vec<f64>], height: u32, width: u32) -> BitGrid {
    let mut grid = BitGrid::new(height, width);
    let mut xs: Vec<f64> = Vec::new();
    for poly in polygons {
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        if pts.len() < 3 {
            continue;
        }
        for row in 0..height {
            let cy = row as f64 + 0.5;
            xs.clear();
            for i in 0..pts.len() {
                let (ax, ay) = pts[i];
                let (bx, by) = pts[(i + 1) % pts.len()];
                if (ay > cy) != (by > cy) {
                    xs.push(ax + (cy - ay) * (bx - ax) / (by - ay));
                }
            }
            if xs.is_empty() {
                continue;
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                // columns whose center cx satisfies pair[0] <= cx < pair[1]
                let start = (pair[0] - 0.5).ceil();
                let end = (pair[1] - 0.5).ceil();
                let start = start.max(0.0) as i64;
                let end = end.min(width as f64) as i64;
                for col in start..end {
                    grid.set(row, col as u32, true);
                }
            }
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_ingest::rle::BoxPx;

    /// Classic ray casting on pixel centers, independent of the scanline path.
    fn point_in_polygon(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
        let mut inside = false;
        let mut j = pts.len() - 1;
        for i in 0..pts.len() {
            let (xi, yi) = pts[i];
            let (xj, yj) = pts[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn doc(annotations: &str) -> String {
        format!(
            r#"{{"images":[{{"id":1,"width":4,"height":4,"file_name":"a.png"}}],
               "categories":[{{"id":1,"name":"cat"}}],
               "annotations":[{annotations}]}}"#
        )
    }

    #[test]
    fn square_polygon_at_origin() {
        let raw = doc(r#"{"id":1,"image_id":1,"category_id":1,"segmentation":[[0,0,2,0,2,2,0,2]],"bbox":[0,0,2,2],"area":4,"iscrowd":0}"#);
        let m = parse_manifest(raw.as_bytes()).unwrap();
        let ann = &m.annotations()[0];
        assert_eq!(ann.area, 4);
        assert_eq!(ann.bbox, BoxPx::new(0, 0, 2, 2));
        // oracle
        let pts = [(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)];
        let expected = BitGrid::from_fn(4, 4, |r, c| {
            point_in_polygon(&pts, c as f64 + 0.5, r as f64 + 0.5)
        });
        assert_eq!(ann.mask.decode(), expected);
    }

    #[test]
    fn rasterizer_matches_ray_casting_on_irregular_polygons() {
        let polys: Vec<Vec<(f64, f64)>> = vec![
            vec![(1.2, 0.3), (9.7, 2.1), (6.4, 8.8), (0.5, 6.0)],
            vec![(2.0, 2.0), (10.0, 2.0), (2.0, 10.0), (10.0, 10.0)], // bow-tie
            vec![(0.0, 0.0), (11.0, 0.5), (5.5, 5.5), (11.0, 11.0), (0.0, 10.5)],
        ];
        for pts in polys {
            let flat: Vec<f64> = pts.iter().flat_map(|&(x, y)| [x, y]).collect();
            let got = rasterize_polygons(&[flat], 12, 12);
            let want = BitGrid::from_fn(12, 12, |r, c| {
                point_in_polygon(&pts, c as f64 + 0.5, r as f64 + 0.5)
            });
            assert_eq!(got, want, "polygon {pts:?}");
        }
    }

    #[test]
    fn missing_image_is_an_integrity_error() {
        let raw = doc(r#"{"id":1,"image_id":99,"category_id":1,"segmentation":[[0,0,2,0,2,2]],"iscrowd":0}"#);
        match parse_manifest(raw.as_bytes()) {
            Err(IngestError::Integrity(msg)) => assert!(msg.contains("99"), "{msg}"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn missing_category_is_an_integrity_error() {
        let raw = doc(r#"{"id":1,"image_id":1,"category_id":7,"segmentation":[[0,0,2,0,2,2]],"iscrowd":0}"#);
        match parse_manifest(raw.as_bytes()) {
            Err(IngestError::Integrity(msg)) => assert!(msg.contains('7'), "{msg}"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn empty_annotation_list() {
        let m = parse_manifest(doc("").as_bytes()).unwrap();
        assert!(m.annotations().is_empty());
        assert_eq!(m.images().len(), 1);
    }

    #[test]
    fn malformed_json_reports_offset() {
        let raw = b"{\"images\": [}";
        match parse_manifest(raw) {
            Err(IngestError::Parse { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn crowd_is_skipped_and_rle_is_canonicalized() {
        let raw = doc(
            r#"{"id":1,"image_id":1,"category_id":1,"segmentation":{"size":[4,4],"counts":[0,0,4,4,8]},"iscrowd":0},
               {"id":2,"image_id":1,"category_id":1,"segmentation":{"size":[4,4],"counts":"04<"},"iscrowd":1},
               {"id":3,"image_id":1,"category_id":1,"segmentation":{"size":[4,4],"counts":[16]},"iscrowd":false}"#,
        );
        let m = parse_manifest(raw.as_bytes()).unwrap();
        assert_eq!(m.annotations().len(), 1);
        assert_eq!(m.annotations()[0].mask.counts(), &[4, 4, 8]);
        assert_eq!(m.annotations()[0].bbox, BoxPx::new(1, 0, 2, 4));
        assert_eq!(m.warnings().skipped_crowd, 1);
        assert_eq!(m.warnings().skipped_empty, 1);
    }

    #[test]
    fn compressed_rle_segmentation() {
        let raw = doc(r#"{"id":1,"image_id":1,"category_id":1,"segmentation":{"size":[4,4],"counts":"448"},"iscrowd":0}"#);
        let m = parse_manifest(raw.as_bytes()).unwrap();
        assert_eq!(m.annotations()[0].mask.counts(), &[4, 4, 8]);
    }

    #[test]
    fn rle_size_mismatch_rejected() {
        let raw = doc(r#"{"id":1,"image_id":1,"category_id":1,"segmentation":{"size":[2,2],"counts":[4]},"iscrowd":0}"#);
        assert!(matches!(
            parse_manifest(raw.as_bytes()),
            Err(IngestError::Integrity(_))
        ));
    }
}
