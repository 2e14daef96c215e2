//! Coordinate maps between source images and their canvas placements.

use super::layout::Placement;
use crate::data_ingest::{encode_rle, BitGrid, BoxPx, MaskRle};

/// A box mapped onto the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappedBox {
    pub rect: BoxPx,
    /// Set when the input box was not inside the source image and had to be
    /// clamped, or when it was empty or collapsed under the scale and got
    /// widened to one pixel.
    pub clamped: bool,
}

fn scale_coord(v: u32, offset: u32, dst_len: u32, src_len: u32) -> u32 {
    // round-half-away-from-zero; all values are non-negative
    let exact = offset as f64 + v as f64 * dst_len as f64 / src_len as f64;
    exact.round() as u32
}

/// Maps a box in source-image pixels into canvas pixels through the
/// placement's affine map, rounding each coordinate and clamping to the rect.
pub fn to_canvas_box(b: &BoxPx, placement: &Placement) -> MappedBox {
    let r = placement.rect;
    let (sw, sh) = placement.source_size;
    let mut clamped = b.x1 > sw || b.y1 > sh || b.is_empty();
    let mut x0 = scale_coord(b.x0.min(sw), r.x0, r.width(), sw).clamp(r.x0, r.x1);
    let mut y0 = scale_coord(b.y0.min(sh), r.y0, r.height(), sh).clamp(r.y0, r.y1);
    let mut x1 = scale_coord(b.x1.min(sw), r.x0, r.width(), sw).clamp(r.x0, r.x1);
    let mut y1 = scale_coord(b.y1.min(sh), r.y0, r.height(), sh).clamp(r.y0, r.y1);
    if x1 <= x0 {
        clamped = true;
        if x0 < r.x1 {
            x1 = x0 + 1;
        } else {
            x0 = x1 - 1;
        }
    }
    if y1 <= y0 {
        clamped = true;
        if y0 < r.y1 {
            y1 = y0 + 1;
        } else {
            y0 = y1 - 1;
        }
    }
    MappedBox {
        rect: BoxPx::new(x0, y0, x1, y1),
        clamped,
    }
}

/// Inverse of [`to_canvas_box`]: canvas pixels back to source pixels.
pub fn from_canvas_box(b: &BoxPx, placement: &Placement) -> BoxPx {
    let r = placement.rect;
    let (sw, sh) = placement.source_size;
    let inv = |v: u32, off: u32, src: u32, dst: u32| -> u32 {
        let v = v.clamp(off, off + dst) - off;
        ((v as f64 * src as f64 / dst as f64).round() as u32).min(src)
    };
    BoxPx::new(
        inv(b.x0, r.x0, sw, r.width()),
        inv(b.y0, r.y0, sh, r.height()),
        inv(b.x1, r.x0, sw, r.width()),
        inv(b.y1, r.y0, sh, r.height()),
    )
}

/// Nearest-neighbour index: destination pixel `i` (of `dst_len`) samples the
/// source pixel under its center.
#[inline]
pub(crate) fn nearest_index(i: u32, src_len: u32, dst_len: u32) -> u32 {
    let idx = ((2 * i as u64 + 1) * src_len as u64) / (2 * dst_len as u64);
    (idx as u32).min(src_len - 1)
}

/// Paints a source-resolution mask into its placement rect on an otherwise
/// empty canvas (nearest neighbour).
pub fn to_canvas_mask(mask: &MaskRle, placement: &Placement, canvas_size: (u32, u32)) -> MaskRle {
    let mut canvas = BitGrid::new(canvas_size.1, canvas_size.0);
    paint_mask(&mut canvas, &mask.decode(), placement);
    encode_rle(&canvas)
}

pub(crate) fn paint_mask(canvas: &mut BitGrid, source: &BitGrid, placement: &Placement) {
    let r = placement.rect;
    let (sw, sh) = (source.width(), source.height());
    let cols: Vec<u32> = (0..r.width()).map(|i| nearest_index(i, sw, r.width())).collect();
    for dy in 0..r.height() {
        let sy = nearest_index(dy, sh, r.height());
        for (dx, &sx) in cols.iter().enumerate() {
            if source.get(sy, sx) {
                canvas.set(r.y0 + dy, r.x0 + dx as u32, true);
            }
        }
    }
}

/// Crops the query rect out of a canvas-resolution mask and resizes it to the
/// query's source size by nearest neighbour on pixel centers.
pub fn from_canvas_mask(mask: &MaskRle, query: &Placement) -> MaskRle {
    let grid = mask.decode();
    let r = query.rect;
    let (sw, sh) = query.source_size;
    let cols: Vec<u32> = (0..sw).map(|i| r.x0 + nearest_index(i, r.width(), sw)).collect();
    let out = BitGrid::from_fn(sh, sw, |row, col| {
        let cy = r.y0 + nearest_index(row, r.height(), sh);
        grid.get(cy, cols[col as usize])
    });
    encode_rle(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas_geometry::layout::Role;

    fn placement(rect: BoxPx, source_size: (u32, u32)) -> Placement {
        Placement {
            role: Role::Query,
            rect,
            source_size,
        }
    }

    #[test]
    fn identity_placement_keeps_boxes() {
        let p = placement(BoxPx::new(0, 0, 640, 480), (640, 480));
        let b = BoxPx::new(13, 7, 200, 311);
        assert_eq!(to_canvas_box(&b, &p).rect, b);
        assert!(!to_canvas_box(&b, &p).clamped);
    }

    #[test]
    fn scaled_box_rounds_to_nearest() {
        let p = placement(BoxPx::new(0, 0, 1008, 604), (504, 504));
        let m = to_canvas_box(&BoxPx::new(100, 100, 200, 200), &p);
        assert_eq!(m.rect, BoxPx::new(200, 120, 400, 240));
    }

    #[test]
    fn full_image_box_maps_to_rect() {
        let rect = BoxPx::new(0, 604, 1008, 1008);
        let p = placement(rect, (500, 333));
        assert_eq!(to_canvas_box(&BoxPx::new(0, 0, 500, 333), &p).rect, rect);
    }

    #[test]
    fn out_of_bounds_box_is_clamped_and_flagged() {
        let rect = BoxPx::new(10, 10, 110, 110);
        let p = placement(rect, (50, 50));
        let m = to_canvas_box(&BoxPx::new(40, 40, 80, 90), &p);
        assert!(m.clamped);
        assert_eq!(m.rect, BoxPx::new(90, 90, 110, 110));
    }

    #[test]
    fn tiny_box_keeps_one_pixel() {
        let p = placement(BoxPx::new(0, 0, 10, 10), (1000, 1000));
        let m = to_canvas_box(&BoxPx::new(500, 500, 501, 501), &p);
        assert_eq!(m.rect.width(), 1);
        assert_eq!(m.rect.height(), 1);
    }

    #[test]
    fn query_rect_mask_decomposes_to_full() {
        let canvas = (1008, 1008);
        let rect = BoxPx::new(0, 604, 1008, 1008);
        let p = placement(rect, (448, 600));
        let mut g = BitGrid::new(canvas.1, canvas.0);
        g.fill_box(&rect, true);
        let out = from_canvas_mask(&encode_rle(&g), &p);
        assert_eq!(out.size(), (600, 448));
        assert_eq!(out.area(), 448 * 600);
        let empty = from_canvas_mask(&MaskRle::empty(1008, 1008), &p);
        assert_eq!(empty.area(), 0);
    }

    #[test]
    fn nearest_index_covers_range() {
        for (src, dst) in [(448, 1008), (1008, 448), (7, 3), (3, 7), (1, 5)] {
            let idx: Vec<u32> = (0..dst).map(|i| nearest_index(i, src, dst)).collect();
            assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            assert!(idx.iter().all(|&i| i < src));
        }
    }
}
